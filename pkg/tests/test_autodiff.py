"""Engine-level checks: forward values, backward gradients vs central finite
differences, SGD update arithmetic, and the error contract."""

import numpy as np
import pytest

from nlgen.autodiff import (Graph, NumericError, ParamSet, ShapeError,
                            grad_check, sgd_step)


def test_matmul_identity_passthrough():
    g = Graph()
    a = g.input(np.array([[1.5, -2.0], [0.25, 4.0]]))
    eye = g.input(np.eye(2))
    out = g.matmul(eye, a)
    np.testing.assert_array_equal(out.value, a.value)


def test_sigmoid_tanh_at_origin():
    g = Graph()
    zero = g.input(np.zeros(3))
    np.testing.assert_allclose(g.sigmoid(zero).value, 0.5)
    np.testing.assert_allclose(g.tanh(zero).value, 0.0)


def test_softmax_uniform_inputs():
    g = Graph()
    out = g.softmax(g.input(np.ones(3)))
    np.testing.assert_allclose(out.value, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_is_probability_vector():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = Graph()
        out = g.softmax(g.input(rng.normal(0, 5, size=7)))
        assert np.all(out.value >= 0)
        assert abs(out.value.sum() - 1.0) < 1e-12


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=5)
    g = Graph()
    a = g.softmax(g.input(scores))
    b = g.softmax(g.input(scores + 17.25))
    np.testing.assert_allclose(a.value, b.value, atol=1e-12)


def test_backward_square_sum():
    params = ParamSet()
    x = params.add("x", np.array([3.0]))
    g = Graph(params)
    loss = g.sum(g.mul(x, x))
    g.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_sigmoid_slope_at_zero():
    params = ParamSet()
    w = params.add("w", np.array([0.0]))
    g = Graph(params)
    loss = g.sum(g.sigmoid(g.mul(w, g.input(np.ones(1)))))
    g.backward(loss)
    np.testing.assert_allclose(w.grad, [0.25])


def test_random_five_parameter_graph_matches_finite_differences():
    rng = np.random.default_rng(42)
    params = ParamSet()
    for i in range(5):
        params.add(f"p{i}", rng.normal(size=()))

    def build(g):
        # scalar chain mixing every arity-1 op with products and sums
        a = g.mul(params["p0"], params["p1"])
        b = g.tanh(g.add(a, params["p2"]))
        c = g.sigmoid(g.mul(b, params["p3"]))
        d = g.add(c, g.neg(params["p4"]))
        return g.sum(g.mul(d, d))

    assert grad_check(build, params, epsilon=1e-5) < 1e-6


def test_grad_check_linear_model():
    rng = np.random.default_rng(7)
    params = ParamSet()
    w = params.add("w", rng.normal(size=3))
    b = params.add("b", rng.normal(size=()))
    x = rng.normal(size=3)
    target = 0.7

    def build(g):
        pred = g.add(g.sum(g.mul(w, g.input(x))), b)
        diff = g.add(pred, g.input(np.asarray(-target)))
        return g.mul(diff, diff)

    assert grad_check(build, params, epsilon=1e-5) < 1e-6


def _op_cases():
    """Per-op scalar-loss builders for the finite-difference property."""

    def matmul_mv(g, p, rng):
        return g.sum(g.tanh(g.matmul(p("A", (3, 4)), p("x", (4,)))))

    def matmul_mm(g, p, rng):
        return g.sum(g.tanh(g.matmul(p("A", (2, 3)), p("B", (3, 2)))))

    def add(g, p, rng):
        return g.sum(g.sigmoid(g.add(p("a", (5,)), p("b", (5,)))))

    def mul(g, p, rng):
        return g.sum(g.mul(p("a", (4,)), p("b", (4,))))

    def mul_scalar_broadcast(g, p, rng):
        return g.sum(g.mul(p("s", ()), g.tanh(p("v", (4,)))))

    def concat(g, p, rng):
        return g.sum(g.tanh(g.concat(p("a", (2,)), p("b", (3,)), p("c", (1,)))))

    def sigmoid(g, p, rng):
        return g.sum(g.sigmoid(p("x", (6,))))

    def tanh(g, p, rng):
        return g.sum(g.tanh(p("x", (6,))))

    def softmax_vec(g, p, rng):
        return g.sum(g.mul(g.softmax(p("x", (5,))), g.input(rng.normal(size=5))))

    def softmax_rows(g, p, rng):
        return g.sum(g.mul(g.softmax(p("X", (3, 4))), g.input(rng.normal(size=(3, 4)))))

    def sum_op(g, p, rng):
        return g.sum(p("X", (2, 3)))

    def scale(g, p, rng):
        return g.sum(g.scale(p("x", (4,)), -2.5))

    def log(g, p, rng):
        return g.sum(g.log(g.sigmoid(p("x", (4,)))))

    def neg(g, p, rng):
        return g.sum(g.neg(g.tanh(p("x", (4,)))))

    def select_row_matrix(g, p, rng):
        return g.sum(g.tanh(g.select_row(p("X", (4, 3)), 2)))

    def select_row_vector(g, p, rng):
        x = p("x", (5,))
        return g.mul(g.select_row(x, 3), g.select_row(x, 0))

    def slice_vec(g, p, rng):
        return g.sum(g.sigmoid(g.slice(p("x", (8,)), 2, 6)))

    return [matmul_mv, matmul_mm, add, mul, mul_scalar_broadcast, concat, sigmoid,
            tanh, softmax_vec, softmax_rows, sum_op, scale, log, neg,
            select_row_matrix, select_row_vector, slice_vec]


@pytest.mark.parametrize("case", _op_cases(), ids=lambda c: c.__name__)
def test_op_gradients_match_finite_differences_over_seeds(case):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = ParamSet()

        def fresh(name, shape):
            return params.add(name, rng.normal(0, 0.8, size=shape))

        err = grad_check(lambda g: case(g, fresh, rng), params, epsilon=1e-5)
        assert err < 1e-4, f"seed {seed}: relative error {err}"


def test_unreachable_parameter_gets_exactly_zero_gradient():
    params = ParamSet()
    used = params.add("used", np.array([1.0, 2.0]))
    unused = params.add("unused", np.array([[5.0, 5.0]]))
    g = Graph(params)
    loss = g.sum(g.mul(used, used))
    g.backward(loss)
    assert np.all(unused.grad == 0.0)
    assert np.any(used.grad != 0.0)


def test_forward_is_deterministic_bit_identical():
    rng = np.random.default_rng(3)
    params = ParamSet()
    w = params.add("w", rng.normal(size=(4, 4)))
    x = rng.normal(size=4)

    def run():
        g = Graph(params)
        out = g.softmax(g.matmul(w, g.input(x)))
        return out.value.tobytes()

    assert run() == run()


def test_forward_rerun_reflects_leaf_updates():
    params = ParamSet()
    w = params.add("w", np.array([2.0]))
    g = Graph(params)
    loss = g.sum(g.mul(w, w))
    assert float(loss.value) == 4.0
    w.value[...] = 3.0
    g.forward()
    assert float(loss.value) == 9.0


def test_shape_mismatch_error_names_both_nodes():
    g = Graph()
    a = g.input(np.zeros((2, 3)), name="left")
    b = g.input(np.zeros(2), name="right")
    with pytest.raises(ShapeError) as exc:
        g.matmul(a, b)
    assert "left" in str(exc.value) and "right" in str(exc.value)


def test_backward_rejects_non_scalar_loss():
    g = Graph()
    v = g.input(np.ones(3))
    out = g.tanh(v)
    with pytest.raises(ShapeError):
        g.backward(out)


def test_forward_check_finite_reports_offending_node():
    g = Graph()
    big = g.input(np.array([1e308]), name="big")
    with np.errstate(over="ignore"):
        out = g.mul(big, g.input(np.array([10.0])))
        assert not np.isfinite(out.value).all()
        with pytest.raises(NumericError) as exc:
            g.forward(check_finite=True)
    assert "elementwise-multiply" in str(exc.value)


def test_sgd_step_basic_update():
    params = ParamSet()
    p = params.add("p", np.array([1.0]))
    p.grad[...] = 1.0
    sgd_step(params, learning_rate=0.1)
    np.testing.assert_allclose(p.value, [0.9])
    assert np.all(p.grad == 0.0)


def test_sgd_step_pure_weight_decay():
    params = ParamSet()
    p = params.add("p", np.array([1.0]))
    sgd_step(params, learning_rate=0.1, l2_coefficient=0.1, apply_l2=True)
    np.testing.assert_allclose(p.value, [0.99])


def test_sgd_step_rejects_non_finite_gradient():
    params = ParamSet()
    p = params.add("p", np.array([1.0]))
    p.grad[...] = np.nan
    with pytest.raises(NumericError):
        sgd_step(params, learning_rate=0.1)
    np.testing.assert_allclose(p.value, [1.0])  # untouched


def test_sgd_on_convex_quadratic_is_monotone():
    rng = np.random.default_rng(11)
    params = ParamSet()
    p = params.add("p", rng.normal(size=6))
    center = rng.normal(size=6)
    g = Graph(params)
    diff = g.add(p, g.input(-center))
    loss = g.sum(g.mul(diff, diff))
    losses = []
    for _ in range(100):
        g.forward()
        losses.append(float(loss.value))
        g.backward(loss)
        sgd_step(params, learning_rate=0.05)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
