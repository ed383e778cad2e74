import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chrnn import tensor as T
from oracles import matvec_oracle


def test_matvec_examples():
    assert T.matvec(np.eye(3), np.array([1.0, 2.0, 3.0])).tolist() == [1, 2, 3]
    assert T.matvec(np.zeros((2, 3)), np.full(3, 5.0)).tolist() == [0, 0]
    assert T.matvec(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones(2)).tolist() == [3, 7]


def test_matvec_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2,\)"):
        T.matvec(np.zeros((2, 3)), np.zeros(2))


@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_matvec_bitwise_equals_scalar_loop(m, n, seed):
    r = np.random.default_rng(seed)
    W, x = r.normal(size=(m, n)), r.normal(size=n)
    assert T.matvec(W, x).tobytes() == matvec_oracle(W, x).tobytes()


def test_activations():
    assert T.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    np.testing.assert_allclose(T.softmax(np.ones(3)), [1 / 3] * 3)
    s = T.sigmoid(np.array([-800.0, 800.0, -30.0, 30.0]))
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0
    t = T.tanh(np.linspace(-5, 5, 11))
    assert np.all(np.abs(t) < 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_softmax_stable_and_normalized(xs):
    p = T.softmax(np.array(xs))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-6


def test_relu_backward_example():
    assert T.relu_backward(np.array([-1.0, 2.0]), np.ones(2)).tolist() == [0, 1]


def test_matvec_backward_is_outer_product(rng):
    W, x, dy = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)
    dW, dx = T.matvec_backward(W, x, dy)
    np.testing.assert_array_equal(dW, np.outer(dy, x))
    params = {"W": W.copy(), "x": x.copy()}
    rep = T.gradcheck(lambda: float(dy @ (params["W"] @ params["x"])), params,
                      {"W": dW, "x": dx})
    assert rep.passed, rep


def test_cross_entropy_examples():
    assert T.cross_entropy(np.full(10, 0.1), 3) == pytest.approx(math.log(10), abs=1e-6)
    assert T.cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    p = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
    y = np.array([1, 0, 1])
    assert T.cross_entropy(p, y) == pytest.approx(np.mean([-math.log(0.8), -math.log(0.5), -math.log(0.1)]))
    # floor keeps the loss finite
    assert T.cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(T.PROB_FLOOR))


@pytest.mark.parametrize("bad", [-1, 3])
def test_cross_entropy_rejects_out_of_range_labels(bad):
    with pytest.raises(ValueError, match="out of range"):
        T.cross_entropy(np.full(3, 1 / 3), bad)


def test_fused_softmax_ce_gradient(rng):
    z = rng.normal(size=(4, 5))
    y = np.array([0, 4, 2, 2])
    g = T.softmax_cross_entropy_backward(T.softmax(z), y)
    onehot = np.eye(5)[y]
    np.testing.assert_allclose(g, (T.softmax(z) - onehot) / 4, atol=1e-15)
    params = {"z": z}
    rep = T.gradcheck(lambda: float(T.cross_entropy(T.softmax(params["z"]), y)), params, {"z": g})
    assert rep.worst.worst_error < 1e-6


def test_loss_is_class_permutation_covariant(rng):
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    perm = rng.permutation(4)
    inv = np.argsort(perm)
    a = T.cross_entropy(T.softmax(z), y)
    b = T.cross_entropy(T.softmax(z[:, perm]), inv[y])
    assert a == pytest.approx(b, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 6))
def test_activation_backwards_pass_gradcheck(seed, n):
    r = np.random.default_rng(seed)
    x = r.normal(size=n) * 2
    x[np.abs(x) < 1e-3] = 0.5  # stay off the ReLU kink
    w = r.normal(size=n)
    for fwd, bwd in ((T.relu, T.relu_backward), (T.sigmoid, T.sigmoid_backward), (T.tanh, T.tanh_backward)):
        p = {"x": x.copy()}
        y = fwd(p["x"])
        rep = T.gradcheck(lambda: float(w @ fwd(p["x"])), p, {"x": bwd(y, w)})
        assert rep.passed, (fwd.__name__, str(rep))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_activation_backwards_float32_tolerance(seed):
    """32-bit evaluation of the same rules agrees with float64 central differences to 1e-2."""
    r = np.random.default_rng(seed)
    x = (r.normal(size=5) * 2).astype(np.float32)
    x[np.abs(x) < 1e-2] = 0.5
    w = r.normal(size=5).astype(np.float32)
    for fwd, bwd in ((T.relu, T.relu_backward), (T.sigmoid, T.sigmoid_backward), (T.tanh, T.tanh_backward)):
        analytic = bwd(fwd(x), w).astype(np.float64)
        eps = 1e-5
        x64 = x.astype(np.float64)
        num = np.array([(w.astype(np.float64) @ fwd(x64 + eps * e) - w.astype(np.float64) @ fwd(x64 - eps * e))
                        / (2 * eps) for e in np.eye(5)])
        assert np.max(T.relative_error(analytic, num)) <= 1e-2


def test_gradcheck_trivial_example():
    p = {"x": np.array([1.0, 2.0])}
    rep = T.gradcheck(lambda: float(np.sum(p["x"] ** 2)), p, {"x": np.array([2.0, 4.0])})
    assert rep.passed
    assert rep.worst.worst_error < 1e-7


def test_gradcheck_reports_wrong_coordinate():
    p = {"x": np.array([1.0, 2.0, 3.0])}
    rep = T.gradcheck(lambda: float(np.sum(p["x"] ** 2)), p, {"x": np.array([2.0, 4.5, 6.0])})
    assert not rep.passed
    (bad,) = rep.failures()
    assert bad.name == "x" and bad.worst_index == (1,)
    assert "FAIL" in str(rep)
    np.testing.assert_array_equal(p["x"], [1.0, 2.0, 3.0])  # restored after nudging


def test_gradcheck_requires_float64():
    p = {"x": np.ones(2, np.float32)}
    with pytest.raises(T.ContractError):
        T.gradcheck(lambda: 0.0, p, {"x": np.zeros(2)})
    with pytest.raises(T.ContractError, match="no analytic gradient"):
        T.gradcheck(lambda: 0.0, {"y": np.ones(2)}, {})


def test_relative_error_floor():
    assert T.relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-5)


def test_dropout_mask_and_init(rng):
    m = T.dropout_mask(rng, (1000,), 0.5)
    assert set(np.unique(m).tolist()) == {0.0, 2.0}
    assert 0.4 < np.mean(m == 0) < 0.6
    assert np.all(T.dropout_mask(rng, (5,), 0.0) == 1)
    W = T.glorot_uniform(rng, (50, 30), 30, 50)
    assert W.dtype == np.float32 and np.max(np.abs(W)) <= math.sqrt(6 / 80)
    a = T.glorot_uniform(np.random.default_rng(3), (4, 4), 4, 4)
    b = T.glorot_uniform(np.random.default_rng(3), (4, 4), 4, 4)
    assert a.tobytes() == b.tobytes()


def test_check_finite():
    T.check_finite(np.ones(3), "x")
    with pytest.raises(T.NumericalError, match=r"x at index \(1,\)"):
        T.check_finite(np.array([0.0, np.nan]), "x")
