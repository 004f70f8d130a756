import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from twohand import numcore as nc
from twohand.errors import GradCheckAborted, ShapeError

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        g[idx] = nc.central_difference(f, x, idx, eps)
    return g


def check_unary(op, x, tol=1e-6):
    p = nc.Parameter(x.copy(), "x")
    weights = np.random.default_rng(0).standard_normal(op(p).shape)
    nc.sum(nc.mul(op(p), weights)).backward()
    num = numeric_grad(lambda: nc.sum(nc.mul(op(p), weights)).item(), p.value)
    np.testing.assert_allclose(p.grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize("op", [nc.relu, nc.square, nc.absolute, nc.softmax_rows, nc.row_norms,
                                nc.transpose, lambda x: nc.reshape(x, (-1,)), lambda x: nc.scale(x, -2.5),
                                lambda x: nc.sum(x, axis=0), lambda x: nc.mean(x, axis=1, keepdims=True)])
def test_unary_gradients(op, rng):
    x = rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4))
    check_unary(op, x)


def test_sqrt_gradient(rng):
    check_unary(nc.sqrt, rng.uniform(0.5, 2.0, (2, 3)))


@given(arrays(np.float64, (3, 4), elements=floats), arrays(np.float64, (4,), elements=floats))
def test_broadcast_add_mul_gradients(a, b):
    pa, pb = nc.Parameter(a.copy(), "a"), nc.Parameter(b.copy(), "b")
    out = nc.sum(nc.mul(nc.add(pa, pb), pb))
    out.backward()
    # d/db sum((a+b)*b) = sum_rows(a) + 2*3*b ; d/da = b broadcast
    np.testing.assert_allclose(pa.grad, np.broadcast_to(b, a.shape), atol=1e-12)
    np.testing.assert_allclose(pb.grad, a.sum(0) + 6 * b, atol=1e-12)


@given(arrays(np.float64, (3, 2), elements=floats), arrays(np.float64, (2, 4), elements=floats))
def test_matmul_gradient_matches_closed_form(a, b):
    pa, pb = nc.Parameter(a.copy(), "a"), nc.Parameter(b.copy(), "b")
    g = np.arange(12.0).reshape(3, 4)
    nc.sum(nc.mul(nc.matmul(pa, pb), g)).backward()
    np.testing.assert_allclose(pa.grad, g @ b.T, atol=1e-12)
    np.testing.assert_allclose(pb.grad, a.T @ g, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nc.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_division_gradient(rng):
    a = nc.Parameter(rng.uniform(1, 2, (2, 2)), "a")
    b = nc.Parameter(rng.uniform(1, 2, (2, 2)), "b")
    nc.sum(nc.div(a, b)).backward()
    np.testing.assert_allclose(a.grad, 1 / b.value)
    np.testing.assert_allclose(b.grad, -a.value / b.value ** 2)


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_shift_invariant(x):
    s = nc.softmax_rows(x).value
    np.testing.assert_allclose(s.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nc.softmax_rows(x + 7.0).value, s, atol=1e-12)


def test_losses_reductions():
    a, b = np.array([[1.0, -2.0]]), np.array([[0.0, 0.0]])
    assert nc.l1(a, b).item() == 3.0
    assert nc.mse(a, b).item() == 2.5
    # |d| = 1 -> 0.5 d^2 / beta = 0.5 ; |d| = 2 -> |d| - 0.5 beta = 1.5
    assert nc.smooth_l1(a, b, beta=1.0, reduction="sum").item() == pytest.approx(2.0)


def test_concat_and_slices_route_gradients():
    a = nc.Parameter(np.ones((2, 2)), "a")
    b = nc.Parameter(np.ones((2, 3)), "b")
    c = nc.concat_cols([a, b])
    out = nc.sum(nc.mul(nc.slice_cols(c, 1, 4), 2.0))
    out.backward()
    np.testing.assert_array_equal(a.grad, [[0, 2], [0, 2]])
    np.testing.assert_array_equal(b.grad, [[2, 2, 0], [2, 2, 0]])
    r = nc.Parameter(np.arange(6.0).reshape(3, 2), "r")
    nc.sum(nc.take_rows(r, np.array([0, 0, 2]))).backward()
    np.testing.assert_array_equal(r.grad, [[2, 2], [0, 0], [1, 1]])


def test_leaf_gradients_accumulate_across_backward_calls():
    p = nc.Parameter(np.array([2.0]), "p")
    for _ in range(3):
        nc.sum(nc.square(p)).backward()
    assert p.grad[0] == pytest.approx(12.0)


def test_backward_seed_scales_gradient():
    p = nc.Parameter(np.array([3.0]), "p")
    nc.sum(nc.square(p)).backward(0.25)
    assert p.grad[0] == pytest.approx(1.5)


def test_backward_requires_scalar_without_seed():
    p = nc.Parameter(np.ones(3), "p")
    with pytest.raises(ShapeError):
        nc.square(p).backward()


def test_param_store_registry():
    store = nc.ParamStore()
    store.add("a", np.zeros((2, 3)))
    store.add("b", np.zeros(4), frozen=True)
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))
    assert store.size() == 10 and len(store) == 2
    assert [p.name for p in store.trainable()] == ["a"]
    with pytest.raises(KeyError):
        store.load_arrays({"a": np.zeros((2, 3))})
    with pytest.raises(ShapeError):
        store.load_arrays({"a": np.zeros((3, 2)), "b": np.zeros(4)})


def test_grad_check_reports_small_error_for_correct_gradients(rng):
    w = nc.Parameter(rng.standard_normal((3, 3)), "w")
    x = rng.standard_normal((4, 3))
    c = rng.standard_normal((4, 3))
    report = nc.grad_check(lambda: nc.sum(nc.mul(nc.softmax_rows(nc.matmul(x, w)), c)), [w])
    assert report["w"] < 1e-6


def test_grad_check_aborts_on_nondeterministic_objective():
    w = nc.Parameter(np.ones(2), "w")
    calls = iter(range(100))
    with pytest.raises(GradCheckAborted):
        nc.grad_check(lambda: nc.scale(nc.sum(w), float(next(calls) + 1)), [w])


def test_grad_check_measures_derivative_next_to_a_kink():
    # a 1e-5 step crosses the relu kink at 3e-6; plain differences would give 8.45e-6
    w = nc.Parameter(np.array([3e-6]), "w")
    assert nc.central_difference(lambda: nc.sum(nc.square(nc.relu(w))).item(), w.value, (0,), 1e-5) \
        == pytest.approx(8.45e-6)
    report = nc.grad_check(lambda: nc.sum(nc.square(nc.relu(w))), [w], floor=1e-12)
    assert report["w"] < 1e-9
    v = nc.Parameter(np.array([5e-8, -2.0]), "v")
    assert nc.grad_check(lambda: nc.sum(nc.absolute(v)), [v])["v"] < 1e-9


def test_replay_forces_recorded_branches():
    with nc.record_branches() as log:
        nc.relu(np.array([-1.0, 2.0]))
        nc.absolute(np.array([-3.0]))
    assert [x.tolist() for x in log] == [[False, True], [-1.0]]
    with nc.replay_branches(log):
        r = nc.relu(np.array([1.0, 2.0]))
        a = nc.absolute(np.array([3.0]))
    np.testing.assert_array_equal(r.value, [0.0, 2.0])
    np.testing.assert_array_equal(a.value, [-3.0])
    with pytest.raises(GradCheckAborted):
        with nc.replay_branches(log):
            nc.relu(np.array([1.0, 2.0, 3.0]))


def test_richardson_difference_is_fourth_order():
    w = nc.Parameter(np.array([0.3]), "w")
    f = lambda: nc.sum(nc.mul(nc.square(nc.square(w)), w))  # w^5, f' = 5 w^4
    plain = nc.grad_check(f, [w], eps=1e-2, floor=1e-12)["w"]
    rich = nc.grad_check(f, [w], eps=1e-2, floor=1e-12, richardson=True)["w"]
    assert rich < 1e-6 < plain


def test_no_grad_builds_no_graph():
    p = nc.Parameter(np.ones(2), "p")
    with nc.no_grad():
        y = nc.sum(nc.square(p))
    assert not y.requires_grad and y.item() == 2.0
    assert nc.sum(nc.square(p)).requires_grad
