"""Kernel backends agree with each other and with a plain-numpy reference."""

import numpy as np
import pytest

from wmlab import kernels


def make_arrays(n=10007, seed=3):
    rng = np.random.default_rng(seed)
    return {
        "p": rng.normal(size=n),
        "g": rng.normal(size=n),
        "m": rng.normal(size=n) * 0.1,
        "v": np.abs(rng.normal(size=n)) * 0.01,
        "x": rng.normal(size=n) * 3.0,
    }


def test_adam_kernel_matches_reference():
    a = make_arrays()
    p, g, m, v = a["p"].copy(), a["g"], a["m"].copy(), a["v"].copy()
    kernels.adam_update(p, g, m, v, 1e-3, 0.5, 0.999, 1e-8, 0.5, 0.001)

    pr, mr, vr = a["p"].copy(), a["m"].copy(), a["v"].copy()
    kernels.numpy_impls()["adam_update"](pr, g, mr, vr, 1e-3, 0.5, 0.999, 1e-8, 0.5, 0.001)
    np.testing.assert_array_equal(p, pr)
    np.testing.assert_array_equal(m, mr)
    np.testing.assert_array_equal(v, vr)


def test_clip_matches_reference_and_bounds():
    a = make_arrays()["p"]
    c = a.copy()
    kernels.clip_inplace(c, 0.5)
    assert np.abs(c).max() <= 0.5
    cr = a.copy()
    kernels.numpy_impls()["clip_inplace"](cr, 0.5)
    np.testing.assert_array_equal(c, cr)


def test_activations_match_reference():
    a = make_arrays()
    s = kernels.sigmoid(a["x"])
    sr = kernels.numpy_impls()["sigmoid"](a["x"])
    # numpy's vectorized exp may differ from libm by one ulp
    np.testing.assert_allclose(s, sr, rtol=0, atol=5e-16)
    np.testing.assert_array_equal(kernels.relu(a["x"]),
                                  kernels.numpy_impls()["relu"](a["x"]))
    np.testing.assert_array_equal(kernels.relu_grad(a["g"], a["x"]),
                                  kernels.numpy_impls()["relu_grad"](a["g"], a["x"]))


def test_sigmoid_extremes_finite():
    out = kernels.sigmoid(np.array([-800.0, 800.0, 0.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 or out[0] < 1e-300
    assert out[1] == 1.0 or out[1] > 1 - 1e-12
    assert out[2] == 0.5


def test_kernels_accept_2d_arrays_in_place():
    p = np.ones((4, 5))
    g = np.full((4, 5), 2.0)
    m = np.zeros((4, 5))
    v = np.zeros((4, 5))
    kernels.adam_update(p, g, m, v, 0.1, 0.5, 0.999, 1e-8, 0.5, 0.001)
    assert p.shape == (4, 5)
    assert np.all(p < 1.0)


def test_backend_env_validation():
    assert kernels.backend_name() in ("numba", "numpy")
    with pytest.raises(ValueError):
        import os
        old = os.environ.get("WMLAB_BACKEND")
        os.environ["WMLAB_BACKEND"] = "cuda"
        try:
            kernels._pick_backend()
        finally:
            if old is None:
                del os.environ["WMLAB_BACKEND"]
            else:
                os.environ["WMLAB_BACKEND"] = old
