import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pctl import numcore as nc
from pctl.numcore import Tensor


def fd_jvp(fn, x, direction, h=1e-5):
    """Central-difference directional derivative of a vector-valued numpy map."""
    return (fn(x + h * direction) - fn(x - h * direction)) / (2 * h)


def vjp_through_graph(op, x, cotangent):
    leaf = Tensor(x, requires_grad=True)
    out = op(leaf)
    nc.backward(nc.sum(nc.sum(nc.mul(out, Tensor(cotangent))) if out.data.ndim else nc.mul(out, Tensor(cotangent))))
    return leaf.grad


UNARY = {
    "exp": nc.exp,
    "tanh": nc.tanh,
    "l2_normalize": nc.l2_normalize,
    "logsumexp": nc.logsumexp,
    "softmax": nc.softmax,
    "log_softmax": nc.log_softmax,
    "transpose": nc.transpose,
    "sum_rows": lambda t: nc.sum(t, axis=1),
    "mean_cols": lambda t: nc.mean(t, axis=0),
    "gather": lambda t: nc.gather(t, np.array([[2, 0], [1, 1], [0, 3]])),
    "take_rows": lambda t: nc.take_rows(t, [2, 0, 2]),
    "select": lambda t: nc.select(t, 1),
    "nll": lambda t: nc.nll(nc.log_softmax(t), [0, 3, 2]),
    "scale": lambda t: nc.scale(t, -1.7),
    "matmul_right": lambda t: nc.matmul(t, Tensor(np.arange(8.0).reshape(4, 2) / 7)),
    "concat": lambda t: nc.concat([t, nc.exp(t)], axis=1),
    "relu_shifted": lambda t: nc.relu(nc.add(t, 10.0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_jvp_matches_finite_differences(name, seed):
    # <v, J^T w> from backprop must equal <w, J v> from central differences
    rng = np.random.default_rng(seed)
    op = UNARY[name]
    x = rng.uniform(-2, 2, (3, 4))
    v = rng.uniform(-1, 1, x.shape)
    fn = lambda a: op(Tensor(a)).data  # noqa: E731
    w = rng.uniform(-1, 1, fn(x).shape)
    jv = fd_jvp(fn, x, v)
    leaf = Tensor(x, requires_grad=True)
    nc.backward(nc.sum(nc.mul(op(leaf), Tensor(w))))
    lhs = float(np.sum(leaf.grad * v))
    rhs = float(np.sum(w * jv))
    assert abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)) < 1e-6


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "dot"])
def test_binary_primitives_both_arguments(name):
    rng = np.random.default_rng(5)
    if name == "matmul":
        a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    elif name == "dot":
        a, b = rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5)
    else:
        a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (1, 4))
    op = getattr(nc, name)
    err_a = nc.gradcheck(lambda t: nc.sum(nc.tanh(op(t, Tensor(b)))), a)
    err_b = nc.gradcheck(lambda t: nc.sum(nc.tanh(op(Tensor(a), t))), b)
    assert err_a < 1e-6 and err_b < 1e-6


def test_l2_normalize_3_4_5():
    np.testing.assert_allclose(nc.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)


def test_log_sum_exp_uniform():
    assert nc.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(0.6931471805599453, abs=1e-15)


def test_softmax_is_overflow_safe():
    np.testing.assert_array_equal(nc.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    big = nc.logsumexp(Tensor([700.0, -700.0, 699.0]))
    assert big.item() == pytest.approx(700 + math.log1p(math.exp(-1)), rel=1e-15)


def test_zero_row_normalises_to_zero_and_counts():
    before = nc.zero_norm_warnings
    out = nc.l2_normalize(Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, 0.0)
    assert nc.zero_norm_warnings == before + 2


def test_shape_error_names_primitive():
    with pytest.raises(nc.ShapeError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_is_an_error():
    with pytest.raises(nc.NonFiniteError):
        nc.exp(Tensor([800.0]))
    with pytest.raises(nc.NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(nc.NonFiniteError):
        nc.log(Tensor([0.0]))


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nc.backward(nc.dot(x, x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_constant_loss_gives_zero_grad():
    x = Tensor([1.0, -3.0], requires_grad=True)
    loss = nc.add(nc.scale(nc.sum(x), 0.0), 5.0)
    nc.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    y = Tensor([4.0], requires_grad=True)
    nc.backward(nc.sum(Tensor([2.0, 3.0])))
    np.testing.assert_array_equal(y.grad, [0.0])


def test_normalise_then_dot_matches_fd():
    rng = np.random.default_rng(0)
    other = Tensor(rng.normal(size=5))
    err = nc.gradcheck(lambda t: nc.dot(nc.l2_normalize(t), other), rng.normal(size=5), 1e-5)
    assert err < 1e-6


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nc.backward(nc.dot(x, x))
    nc.backward(nc.dot(x, x))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nc.GraphError):
        nc.backward(nc.exp(x))


def test_shared_subexpression_visited_once():
    x = Tensor([0.3, -0.2], requires_grad=True)
    y = nc.tanh(x)
    loss = nc.sum(nc.mul(y, y))  # y feeds both sides of mul
    nc.backward(loss)
    expected = 2 * np.tanh(x.data) * (1 - np.tanh(x.data) ** 2)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-14)


def test_graph_topological_order():
    x = Tensor([1.0], requires_grad=True)
    a = nc.exp(x)
    b = nc.add(a, a)
    g = nc.Graph.from_root(nc.sum(b))
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert pos[id(x)] < pos[id(a)] < pos[id(b)]
    assert len(g.nodes) == len({id(n) for n in g.nodes})
    assert g.leaves == [x]


def test_gradient_linearity():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    f1 = lambda: nc.sum(nc.tanh(nc.matmul(x, w)))  # noqa: E731
    f2 = lambda: nc.logsumexp(nc.sum(nc.matmul(x, w), axis=1))  # noqa: E731
    nc.backward(nc.add(f1(), f2()))
    together = w.grad.copy()
    w.zero_grad()
    nc.backward(f1())
    nc.backward(f2())
    np.testing.assert_allclose(together, w.grad, rtol=1e-13, atol=1e-15)


def test_gradcheck_sum_of_squares():
    rng = np.random.default_rng(2)
    assert nc.gradcheck(lambda t: nc.sum(nc.mul(t, t)), rng.normal(size=(3, 3))) < 1e-9


def test_gradcheck_reports_coordinate_of_non_finite():
    def f(t):
        # analytic grad fine, but a perturbed evaluation blows up at coordinate 1
        return nc.sum(nc.exp(nc.scale(t, 1.0)))

    with pytest.raises(nc.NonFiniteError):
        nc.gradcheck(f, np.array([0.0, 709.9]), 1e-3)
    with pytest.raises(ValueError):
        nc.gradcheck(f, np.zeros(2), 0.1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = nc.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)).filter(lambda a: np.all(np.abs(a).sum(axis=1) > 1e-3)))
def test_l2_rows_have_unit_norm(x):
    y = nc.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)


# --- optimiser ----------------------------------------------------------------


def _one_param(p0, lr, mu):
    p = Tensor([p0], requires_grad=True)
    state = nc.SgdMomentumState.for_groups([([p], lr)], momentum=mu)
    return p, state


def test_sgd_plain_gradient_descent():
    p, s = _one_param(1.0, 1.0, 0.0)
    nc.sgd_step([p], [np.array([0.5])], s)
    assert p.data[0] == 0.5


def test_sgd_zero_gradient_decays_velocity():
    p, s = _one_param(3.0, 0.1, 0.9)
    nc.sgd_step([p], [np.array([1.0])], s)
    after_first = p.data[0]
    v = s.velocity[0][0]
    for t in range(1, 6):
        nc.sgd_step([p], [np.array([0.0])], s)
        assert s.velocity[0][0] == pytest.approx(v * 0.9**t, rel=1e-15)
    # p keeps coasting on the decaying velocity
    assert p.data[0] < after_first
    p2, s2 = _one_param(3.0, 0.1, 0.9)
    for _ in range(5):
        nc.sgd_step([p2], [np.array([0.0])], s2)
    assert p2.data[0] == 3.0


def test_sgd_two_momentum_steps():
    p, s = _one_param(0.0, 0.1, 0.9)
    nc.sgd_step([p], [np.array([1.0])], s)
    nc.sgd_step([p], [np.array([1.0])], s)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_refuses_non_finite_gradient():
    p, s = _one_param(1.0, 0.1, 0.9)
    q = Tensor([2.0], requires_grad=True)
    s = nc.SgdMomentumState.for_groups([([p, q], 0.1)], 0.9)
    with pytest.raises(nc.NonFiniteError):
        nc.sgd_step([p, q], [np.array([1.0]), np.array([np.inf])], s)
    assert p.data[0] == 1.0 and q.data[0] == 2.0


def test_sgd_state_validation():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        nc.SgdMomentumState.for_groups([([p], 0.1)], momentum=1.0)
    with pytest.raises(ValueError):
        nc.SgdMomentumState.for_groups([([p], 0.0)], momentum=0.5)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, 3, elements=st.floats(-5, 5)),
    arrays(np.float64, 3, elements=st.floats(-5, 5)),
    st.floats(1e-4, 1.0),
)
def test_sgd_without_momentum_is_vanilla(p0, g, lr):
    p = Tensor(p0, requires_grad=True)
    s = nc.SgdMomentumState.for_groups([([p], lr)], momentum=0.0)
    nc.sgd_step([p], [g], s)
    np.testing.assert_array_equal(p.data, p0 - lr * g)
