"""Hot elementwise kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the WMLAB_BACKEND environment
variable: "numba" or "numpy". Unset means numba when importable, numpy
otherwise. Matrix products are deliberately left to BLAS; only fused
elementwise loops live here (optimizer updates, clipping, activations),
where avoiding numpy temporaries pays off on multi-million-parameter nets.

Both backends compute the same per-element expressions in the same order;
results agree bitwise except sigmoid, where numpy's vectorized exp can land
one ulp from libm's. benchmarks/bench_kernels.py compares speed of both.
"""

from __future__ import annotations

import math
import os

import numpy as np

_ENV_VAR = "WMLAB_BACKEND"


def _pick_backend() -> str:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _pick_backend()


def backend_name() -> str:
    """Active kernel backend, 'numba' or 'numpy'."""
    return BACKEND


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _adam_update_np(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m[:] = beta1 * m + (1.0 - beta1) * grad
    v[:] = beta2 * v + (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _clip_inplace_np(a, limit):
    np.clip(a, -limit, limit, out=a)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _relu_np(x):
    return np.maximum(x, 0.0)


def _relu_grad_np(gout, x):
    return gout * (x > 0.0)


_NUMPY_IMPLS = {
    "adam_update": _adam_update_np,
    "clip_inplace": _clip_inplace_np,
    "sigmoid": _sigmoid_np,
    "relu": _relu_np,
    "relu_grad": _relu_grad_np,
}


# ---------------------------------------------------------------------------
# numba fast path
# ---------------------------------------------------------------------------

def _build_numba_impls():
    from numba import njit

    @njit(cache=True)
    def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(param.size):
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * (grad[i] * grad[i])
            param[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)

    @njit(cache=True)
    def clip_inplace(a, limit):
        for i in range(a.size):
            if a[i] > limit:
                a[i] = limit
            elif a[i] < -limit:
                a[i] = -limit

    @njit(cache=True)
    def sigmoid(x):
        out = np.empty_like(x)
        for i in range(x.size):
            xi = x[i]
            if xi >= 0.0:
                out[i] = 1.0 / (1.0 + math.exp(-xi))
            else:
                e = math.exp(xi)
                out[i] = e / (1.0 + e)
        return out

    @njit(cache=True)
    def relu(x):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = x[i] if x[i] > 0.0 else 0.0
        return out

    @njit(cache=True)
    def relu_grad(gout, x):
        out = np.empty_like(gout)
        for i in range(gout.size):
            out[i] = gout[i] if x[i] > 0.0 else 0.0
        return out

    return {
        "adam_update": adam_update,
        "clip_inplace": clip_inplace,
        "sigmoid": sigmoid,
        "relu": relu,
        "relu_grad": relu_grad,
    }


_IMPLS = _build_numba_impls() if BACKEND == "numba" else _NUMPY_IMPLS

# numba kernels are 1-D; these wrappers keep the array-shape contract uniform.


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam update with precomputed bias corrections bc1, bc2."""
    _IMPLS["adam_update"](param.reshape(-1), grad.reshape(-1),
                          m.reshape(-1), v.reshape(-1),
                          lr, beta1, beta2, eps, bc1, bc2)


def clip_inplace(a, limit):
    """Clamp every entry of a to [-limit, limit], in place."""
    _IMPLS["clip_inplace"](a.reshape(-1), limit)


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.ascontiguousarray(x)
    return _IMPLS["sigmoid"](x.reshape(-1)).reshape(x.shape)


def relu(x):
    x = np.ascontiguousarray(x)
    return _IMPLS["relu"](x.reshape(-1)).reshape(x.shape)


def relu_grad(gout, x):
    gout = np.ascontiguousarray(gout)
    x = np.ascontiguousarray(x)
    return _IMPLS["relu_grad"](gout.reshape(-1), x.reshape(-1)).reshape(gout.shape)


def numpy_impls():
    """The pure-numpy implementations, regardless of active backend."""
    return dict(_NUMPY_IMPLS)
