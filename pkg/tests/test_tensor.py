"""Autodiff engine: op values, gradients vs finite differences, Adam, clamping."""

import math

import numpy as np
import pytest

from wmlab import tensor as T
from wmlab.optim import AdamState, adam_step, clamp_weights


def fd_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at x, the independent oracle."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_grad(make_loss, x, rtol=1e-4, atol=1e-6):
    """Analytic gradient against central differences at the spec tolerance."""
    t = T.Tensor(x, requires_grad=True)
    loss = make_loss(t)
    loss.backward()
    ana = t.grad.copy()
    num = fd_grad(lambda: make_loss(T.Tensor(x)).item(), x)
    big = np.abs(num) >= 1e-3
    if big.any():
        np.testing.assert_allclose(ana[big], num[big], rtol=rtol)
    if (~big).any():
        np.testing.assert_allclose(ana[~big], num[~big], atol=atol)


def test_sigmoid_at_zero():
    assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5


def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, T.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_bce_half_is_ln2():
    # -(1 * log 0.5) evaluated by hand
    loss = T.binary_cross_entropy(T.Tensor([0.5]), np.array([1.0]))
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(e.value)


def test_elementwise_shape_error():
    with pytest.raises(T.ShapeError) as e:
        T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))
    assert "(3,)" in str(e.value) and "(4,)" in str(e.value)


def test_sum_of_squares_grad():
    w = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(T.multiply(w, w)).backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_mean_grad():
    w = T.Tensor(np.arange(4.0), requires_grad=True)
    T.mean(w).backward()
    np.testing.assert_array_equal(w.grad, [0.25, 0.25, 0.25, 0.25])


def test_non_scalar_loss_rejected():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.add(w, 1.0).backward()


def test_grad_accumulates_across_paths():
    w = T.Tensor([1.5], requires_grad=True)
    # w used twice: loss = w*w + 3w, dloss/dw = 2w + 3
    loss = T.add(T.tsum(T.multiply(w, w)), T.tsum(T.multiply(w, 3.0)))
    loss.backward()
    np.testing.assert_allclose(w.grad, [6.0])


def test_uniform_softmax_cross_entropy_is_ln10():
    logits = T.Tensor(np.zeros((4, 10)))
    loss = T.softmax_cross_entropy(logits, np.array([0, 3, 5, 9]))
    assert abs(loss.item() - math.log(10)) < 1e-12


def test_softmax_label_out_of_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_sort_descending_values_and_multiset():
    x = T.Tensor([0.3, -0.1, 0.5])
    out = T.sort_descending(x)
    np.testing.assert_array_equal(out.data, [0.5, 0.3, -0.1])
    rng = np.random.default_rng(0)
    v = rng.normal(size=23)
    s = T.sort_descending(T.Tensor(v)).data
    assert sorted(s) == sorted(v.tolist())
    # already sorted stays put
    np.testing.assert_array_equal(T.sort_descending(T.Tensor(s)).data, s)


def test_sort_gradient_routes_through_inverse_permutation():
    x = np.array([0.3, -0.1, 0.5])

    def loss(t):
        # weight the sorted values so each position matters differently
        return T.tsum(T.multiply(T.sort_descending(t), T.Tensor([1.0, 10.0, 100.0])))

    t = T.Tensor(x, requires_grad=True)
    loss(t).backward()
    # sorted order is [x2, x0, x1] so grads land at [10, 100, 1]
    np.testing.assert_array_equal(t.grad, [10.0, 100.0, 1.0])


GRAD_CASES = [
    ("matmul", lambda r: (r.normal(size=(3, 4)),),
     lambda t: T.tsum(T.multiply(T.matmul(t, T.Tensor(np.arange(12.0).reshape(4, 3))), 0.3))),
    ("add", lambda r: (r.uniform(-2, 2, 5),),
     lambda t: T.tsum(T.multiply(T.add(t, T.Tensor(np.ones(5))), 2.0))),
    ("subtract", lambda r: (r.uniform(-2, 2, 5),),
     lambda t: T.tsum(T.subtract(t, T.Tensor(np.full(5, 0.5))))),
    ("multiply", lambda r: (r.uniform(-2, 2, 6),),
     lambda t: T.tsum(T.multiply(t, T.Tensor(np.linspace(-1, 1, 6))))),
    ("negate", lambda r: (r.uniform(-2, 2, 4),),
     lambda t: T.tsum(T.negate(t))),
    ("absolute", lambda r: (r.uniform(0.2, 2, 5) * np.array([1, -1, 1, -1, 1]),),
     lambda t: T.tsum(T.absolute(t))),
    ("relu", lambda r: (r.uniform(-2, 2, 9) + 0.01,),
     lambda t: T.tsum(T.relu(t))),
    ("sigmoid", lambda r: (r.uniform(-2, 2, 7),),
     lambda t: T.tsum(T.sigmoid(t))),
    ("log", lambda r: (r.uniform(0.05, 2, 6),),
     lambda t: T.tsum(T.log(t))),
    ("exp", lambda r: (r.uniform(-2, 2, 6),),
     lambda t: T.tsum(T.exp(t))),
    ("mean", lambda r: (r.uniform(-2, 2, 8),),
     lambda t: T.mean(t)),
    ("sum", lambda r: (r.uniform(-2, 2, 8),),
     lambda t: T.tsum(t)),
    ("softmax_ce", lambda r: (r.uniform(-2, 2, (5, 4)),),
     lambda t: T.softmax_cross_entropy(t, np.array([0, 1, 2, 3, 1]))),
    ("bce", lambda r: (r.uniform(0.05, 0.95, 6),),
     lambda t: T.binary_cross_entropy(t, np.array([1.0, 0, 1, 0, 1, 0]))),
    ("squared_error", lambda r: (r.uniform(-2, 2, 6),),
     lambda t: T.squared_error(t, np.linspace(0, 1, 6))),
    ("concat", lambda r: (r.uniform(-2, 2, (2, 3)),),
     lambda t: T.tsum(T.multiply(T.concat([t, T.Tensor(np.ones((2, 3)))], axis=0), 1.5))),
    ("slice_rows", lambda r: (r.uniform(-2, 2, (5, 2)),),
     lambda t: T.tsum(T.slice_rows(t, 1, 4))),
    ("reshape", lambda r: (r.uniform(-2, 2, (2, 6)),),
     lambda t: T.tsum(T.multiply(T.reshape(t, (3, 4)), T.Tensor(np.arange(12.0).reshape(3, 4))))),
    ("sort", lambda r: (r.uniform(-2, 2, 10),),
     lambda t: T.tsum(T.multiply(T.sort_descending(t), T.Tensor(np.linspace(1, 3, 10))))),
    ("add_bias", lambda r: (r.uniform(-2, 2, (4, 3)),),
     lambda t: T.tsum(T.add_bias(t, T.Tensor(np.array([0.1, -0.2, 0.3]))))),
    ("sigmoid_chain", lambda r: (r.uniform(-2, 2, (2, 3)),),
     lambda t: T.binary_cross_entropy(
         T.sigmoid(T.matmul(t, T.Tensor(np.linspace(-1, 1, 9).reshape(3, 3)))),
         np.tile([1.0, 0.0, 1.0], (2, 1)))),
]


@pytest.mark.parametrize("name,make_x,make_loss", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradcheck(name, make_x, make_loss):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(3):
        (x,) = make_x(rng)
        check_grad(make_loss, np.asarray(x, dtype=np.float64))


def test_gradcheck_bias_param():
    # same chain, but differentiate w.r.t. the bias instead of the matrix
    rng = np.random.default_rng(5)
    m = rng.uniform(-2, 2, (4, 3))

    def loss(b):
        return T.tsum(T.multiply(T.add_bias(T.Tensor(m), b), 2.0))

    check_grad(loss, rng.uniform(-2, 2, 3))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def quad_loss(x):
    d = T.subtract(x, 3.0)
    return T.tsum(T.multiply(d, d))


def test_adam_moves_against_gradient():
    x = T.Tensor([1.0], requires_grad=True)
    st = AdamState(lr=0.1)
    T.tsum(T.multiply(x, x)).backward()
    assert x.grad[0] > 0
    adam_step([x], st)
    assert x.data[0] < 1.0
    assert x.grad is None


def test_adam_converges_on_scalar_quadratic():
    # the optimizer run is its own oracle on this convex problem
    x = T.Tensor([0.0], requires_grad=True)
    st = AdamState(lr=0.01)
    for _ in range(2000):
        quad_loss(x).backward()
        adam_step([x], st)
    assert abs(x.data[0] - 3.0) < 0.01


def test_adam_step_count_and_missing_grad():
    x = T.Tensor([1.0], requires_grad=True)
    st = AdamState(lr=0.1)
    for k in range(1, 4):
        T.tsum(T.multiply(x, x)).backward()
        adam_step([x], st)
        assert st.step_count == k
    with pytest.raises(ValueError, match="no gradient"):
        adam_step([x], st)


def test_clamp_examples():
    p = T.Tensor([0.5, -0.02, 0.005])
    clamp_weights([p], 0.01)
    np.testing.assert_array_equal(p.data, [0.01, -0.01, 0.005])
    q = T.Tensor([0.004, -0.009])
    clamp_weights([q], 0.01)
    np.testing.assert_array_equal(q.data, [0.004, -0.009])
    with pytest.raises(ValueError):
        clamp_weights([p], 0.0)
    with pytest.raises(ValueError):
        clamp_weights([p], -1.0)


def test_deterministic_training_trajectory():
    def run():
        rng = np.random.default_rng(42)
        w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        st = AdamState(lr=0.01)
        for _ in range(50):
            x = T.Tensor(rng.normal(size=(3, 4)))
            loss = T.mean(T.multiply(T.matmul(x, w), T.matmul(x, w)))
            loss.backward()
            adam_step([w], st)
        return w.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)
