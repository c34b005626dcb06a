import numpy as np
import pytest

from dcffnet import gradsuite
from dcffnet import tensor as T
from dcffnet.autodiff import OPS, Graph, OptimState, backward, grad_check, register_op, sgd_step


def test_grad_of_sum_is_ones():
    g = Graph()
    w = g.param("w", np.random.default_rng(0).standard_normal((2, 3)))
    grads = backward(g, g.sum(w))
    assert np.array_equal(grads["w"], np.ones((2, 3)))


def test_xcorr_template_grad_counts_windows():
    g = Graph()
    s = g.const(np.ones((1, 3, 3)))
    t = g.param("t", np.ones((1, 2, 2)))
    grads = backward(g, g.sum(g.depthwise_xcorr(s, t)))
    assert np.array_equal(grads["t"], np.full((1, 2, 2), 4.0))
    assert set(grads) == {"t"}  # constants get no entry


def test_non_scalar_loss_rejected():
    g = Graph()
    w = g.param("w", np.ones(3))
    with pytest.raises(T.ShapeError):
        backward(g, w)


def test_op_without_rule_rejected_by_name():
    if "opaque_test_op" not in OPS:
        register_op("opaque_test_op", lambda x: x.copy(), None)
    g = Graph()
    w = g.param("w", np.ones(2))
    with pytest.raises(TypeError, match="opaque_test_op"):
        backward(g, g.sum(g.apply("opaque_test_op", w)))


def test_shared_parameter_accumulates():
    g = Graph()
    arr = np.array([2.0, -1.0])
    a, b = g.param("w", arr), g.param("w", arr)
    assert a == b
    grads = backward(g, g.add(g.sum(a), g.sum(g.scale(b, 3.0))))
    assert np.array_equal(grads["w"], [4.0, 4.0])
    with pytest.raises(ValueError):
        g.param("w", arr.copy())


def test_sgd_examples():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([0.5])}, OptimState(0.1, 0.0, 0.0))
    assert p["w"][0] == 0.95

    p = {"w": np.array([1.0])}
    st = OptimState(0.1, 0.9, 0.0, {"w": np.array([1.0])})
    sgd_step(p, {"w": np.array([0.0])}, st)
    assert st.velocity["w"][0] == 0.9
    assert p["w"][0] == pytest.approx(0.91, abs=1e-15)

    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([0.0])}, OptimState(0.1, 0.0, 0.0005))
    assert p["w"][0] == pytest.approx(0.99995, abs=1e-15)


def test_sgd_rejects_mismatched_shapes():
    with pytest.raises(T.ShapeError):
        sgd_step({"w": np.ones(2)}, {"w": np.ones(3)}, OptimState(0.1))
    with pytest.raises(ValueError):
        OptimState(-0.1)


def test_frozen_parameters_untouched():
    rng = np.random.default_rng(0)
    p = {"a": rng.standard_normal(4), "b": rng.standard_normal(4)}
    before = {k: v.copy() for k, v in p.items()}
    st = OptimState(0.1)
    for _ in range(5):
        sgd_step(p, {k: rng.standard_normal(4) for k in p}, st, trainable={"a"})
    assert np.array_equal(p["b"], before["b"])
    assert not np.array_equal(p["a"], before["a"])
    assert "b" not in st.velocity


def _toy_loss_graph(seed_scale=1.0):
    rng = np.random.default_rng(3)
    g = Graph()
    x = g.const(rng.standard_normal((2, 6, 6)))
    w = g.param("w", rng.standard_normal((3, 2, 3, 3)))
    b = g.param("b", rng.standard_normal(3))
    y = g.relu(g.conv2d(x, w, b, T.ConvSpec(3, 3, 1, 0, 2, 3)))
    loss = g.scale(g.sum(y), seed_scale)
    return g, loss


def test_backward_deterministic_and_linear_in_seed():
    g1, l1 = _toy_loss_graph()
    g2, l2 = _toy_loss_graph()
    a, b = backward(g1, l1), backward(g2, l2)
    for k in a:
        assert np.array_equal(a[k], b[k])
    scaled = backward(g1, l1, seed=2.5)
    for k in a:
        np.testing.assert_allclose(scaled[k], 2.5 * a[k], rtol=1e-12)


def test_grad_check_examples():
    rng = np.random.default_rng(0)
    spec = T.ConvSpec(3, 3, 1, 1, 2, 2)
    r = grad_check(lambda g, p: g.conv2d(p["x"], p["w"], p["b"], spec),
                   {"x": rng.standard_normal((2, 4, 4)), "w": rng.standard_normal(spec.weight_shape),
                    "b": rng.standard_normal(2)})
    assert r.passed and r.worst < 1e-4

    x = rng.standard_normal((1, 4, 4))
    while np.abs(x).min() < 1e-3:
        x = rng.standard_normal((1, 4, 4))
    assert grad_check(lambda g, p: g.relu(p["x"]), {"x": x}).worst < 1e-4

    r = grad_check(lambda g, p: g.resize(p["x"], (1, 5, 5)), {"x": rng.standard_normal((1, 2, 2))})
    assert r.worst < 1e-4


def test_grad_check_reports_a_wrong_rule():
    if "bad_square" not in OPS:
        register_op("bad_square", lambda x: x * x, lambda g, out, x: (g * x,))  # missing factor 2
    r = grad_check(lambda g, p: g.apply("bad_square", p["x"]), {"x": np.array([1.0, 2.0, 3.0])})
    assert not r.passed


@pytest.fixture(scope="module")
def suite():
    return gradsuite.run()


def test_gradient_suite_all_pass(suite):
    failing = {r.name: r.worst for r in suite if not r.passed}
    assert not failing


def test_gradient_suite_covers_every_differentiable_op(suite):
    differentiable = {name for name, op in OPS.items() if op.backward is not None}
    differentiable -= {"bad_square"}
    assert differentiable <= gradsuite.covered_ops()
    assert {"logistic_loss", "softmax_ce", "iou_loss"} <= {r.name for r in suite}


def test_gradient_suite_subset_sees_same_inputs(suite):
    sub = gradsuite.run(["relu", "iou_loss"])
    full = {r.name: r.worst for r in suite}
    for r in sub:
        assert r.worst == full[r.name]
