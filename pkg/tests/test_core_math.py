import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sg2vec import core_math as cm


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def fd_check(closure, params, tol=1e-6):
    report = cm.grad_check(closure, params)
    assert max(report.values()) < tol, report


# ---------------------------------------------------------------- linear

def test_linear_identity():
    out = cm.linear(cm.constant(np.eye(2)), cm.constant([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_linear_sum_with_bias():
    out = cm.linear(cm.constant([[1, 1]]), cm.constant([[1], [1]]), cm.constant([0]))
    np.testing.assert_array_equal(out.value, [[2]])


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(cm.linear(cm.constant(a), cm.constant(b)).value,
                               triple_loop(a, b), rtol=1e-13, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_property_against_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    np.testing.assert_allclose(cm.matmul(cm.constant(a), cm.constant(b)).value,
                               triple_loop(a, b), rtol=1e-12, atol=1e-12)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(cm.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        cm.linear(cm.constant(np.ones((2, 3))), cm.constant(np.ones((2, 2))))


def test_bias_length_checked():
    with pytest.raises(cm.DimensionError):
        cm.linear(cm.constant(np.ones((2, 3))), cm.constant(np.ones((3, 2))), cm.constant([1, 2, 3]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50, allow_nan=False), st.integers(0, 2**31))
def test_linear_commutes_with_scalar(c, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    lhs = cm.linear(cm.constant(c * x), cm.constant(w)).value
    rhs = c * cm.linear(cm.constant(x), cm.constant(w)).value
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * max(1.0, abs(c)))


# ---------------------------------------------------------------- activations

def test_relu_example():
    np.testing.assert_array_equal(cm.relu(cm.constant([[-1, 2]])).value, [[0, 2]])


def test_log_softmax_symmetric_row():
    out = cm.log_softmax_rows(cm.constant([[0, 0]])).value
    np.testing.assert_allclose(out, [[math.log(0.5)] * 2], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.floats(-500, 500), st.integers(0, 2**31))
def test_log_softmax_normalised_and_shift_invariant(n, m, shift, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(n, m))
    a = cm.log_softmax_rows(cm.constant(x)).value
    b = cm.log_softmax_rows(cm.constant(x + shift)).value
    np.testing.assert_allclose(np.exp(a).sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(a, b, atol=1e-9)


@pytest.mark.parametrize("z", [-20.0, -40.0, -300.0, -745.0, -1000.0])
def test_sigmoid_large_negative_against_mpmath(z):
    s = cm.sigmoid(cm.constant([[z]])).value[0, 0]
    assert 0.0 < s < 1e-6
    assert np.isfinite(np.log(s))
    exact = float(1 / (1 + mpmath.exp(-mpmath.mpf(z))))
    if exact > np.finfo(float).tiny:
        assert s == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("z", [-8.0, -1.5, 0.0, 0.3, 4.0, 30.0])
def test_sigmoid_tanh_against_mpmath(z):
    assert cm.sigmoid(cm.constant([[z]])).value[0, 0] == pytest.approx(
        float(1 / (1 + mpmath.exp(-z))), rel=1e-14)
    assert cm.tanh(cm.constant([[z]])).value[0, 0] == pytest.approx(float(mpmath.tanh(z)), rel=1e-14)


def test_activation_dispatch_rejects_unknown():
    with pytest.raises(ValueError):
        cm.activation(cm.constant([[1.0]]), "gelu")


# ---------------------------------------------------------------- backward

def test_quadratic_gradient():
    w = cm.param(np.array([[1.0, -2.0], [0.5, 3.0]]), "w")
    grads = cm.backward(cm.sum_all(cm.mul(w, w)), {"w": w})
    np.testing.assert_allclose(grads["w"], 2 * w.value)


def test_unreachable_parameter_gets_zero():
    w = cm.param(np.ones((2, 2)), "w")
    p = cm.param(np.ones((3, 1)), "p")
    grads = cm.backward(cm.sum_all(w), {"w": w, "p": p})
    np.testing.assert_array_equal(grads["p"], np.zeros((3, 1)))
    assert grads["p"].shape == p.value.shape


def test_backward_rejects_non_scalar():
    w = cm.param(np.ones((2, 2)), "w")
    with pytest.raises(cm.ContractError):
        cm.backward(cm.mul(w, w))


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(0)
    wv, x = rng.normal(size=(3, 2)), rng.normal(size=(4, 3))

    def losses(w):
        h = cm.tanh(cm.linear(cm.constant(x), w))
        return cm.sum_all(cm.mul(h, h)), cm.sum_all(cm.sigmoid(h))

    w = cm.param(wv.copy(), "w")
    g1 = cm.backward(losses(w)[0], {"w": w})["w"]
    w = cm.param(wv.copy(), "w")
    g2 = cm.backward(losses(w)[1], {"w": w})["w"]
    w = cm.param(wv.copy(), "w")
    l1, l2 = losses(w)
    g = cm.backward(cm.add(cm.scale(l1, 2.5), cm.scale(l2, -0.7)), {"w": w})["w"]
    np.testing.assert_allclose(g, 2.5 * g1 - 0.7 * g2, atol=1e-9)


def test_shared_subexpression_accumulates():
    w = cm.param(np.array([[2.0]]), "w")
    y = cm.mul(w, w)
    loss = cm.add(y, y)
    assert cm.backward(loss, {"w": w})["w"][0, 0] == pytest.approx(8.0)


# ---------------------------------------------------------------- gradient oracle per primitive

RNG = np.random.default_rng(11)


def test_grad_linear_layer():
    x = RNG.normal(size=(5, 3))
    report = cm.grad_check(lambda t: cm.sum_all(cm.mul(cm.linear(cm.constant(x), t["w"], t["b"]),
                                                      cm.constant(RNG_FIXED))),
                           {"w": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(1, 4))})
    assert max(report.values()) < 1e-7


RNG_FIXED = np.random.default_rng(5).normal(size=(5, 4))


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
def test_grad_elementwise(kind):
    # keep relu inputs away from the kink
    v = RNG.normal(size=(4, 3))
    v[np.abs(v) < 0.05] = 0.3
    fd_check(lambda t: cm.sum_all(cm.mul(cm.activation(t["x"], kind), cm.constant(v))), {"x": v.copy()})


def test_grad_log_softmax_and_nll():
    targets = np.array([0, 1, 1, 0])
    fd_check(lambda t: cm.weighted_nll(cm.log_softmax_rows(t["x"]), targets, (0.7, 2.0)),
             {"x": RNG.normal(size=(4, 2))})


def test_grad_broadcast_add_mul_concat():
    def f(t):
        a = cm.add(t["a"], t["row"])
        b = cm.mul(a, t["col"])
        c = cm.concat_cols([a, b])
        d = cm.concat_rows([c, cm.scale(c, -0.5)])
        return cm.sum_all(cm.tanh(d))
    fd_check(f, {"a": RNG.normal(size=(3, 4)), "row": RNG.normal(size=(1, 4)),
                 "col": RNG.normal(size=(3, 1))})


def test_grad_gather_with_repeats():
    idx = np.array([2, 0, 2, 1, 2])
    w = RNG.normal(size=(5, 2))
    fd_check(lambda t: cm.sum_all(cm.mul(cm.gather_rows(t["x"], idx), cm.constant(w))),
             {"x": RNG.normal(size=(3, 2))})


@pytest.mark.parametrize("kind", ["add", "mean", "max"])
def test_grad_segment_reduce(kind):
    seg = np.array([0, 0, 1, 2, 2, 2])
    w = RNG.normal(size=(3, 4))
    fd_check(lambda t: cm.sum_all(cm.mul(cm.segment_reduce(t["x"], seg, 3, kind), cm.constant(w))),
             {"x": RNG.normal(size=(6, 4))})


def test_segment_reduce_values():
    x = cm.constant([[1.0, 5.0], [3.0, -1.0], [2.0, 2.0]])
    seg = [0, 0, 1]
    np.testing.assert_array_equal(cm.segment_reduce(x, seg, 2, "add").value, [[4, 4], [2, 2]])
    np.testing.assert_array_equal(cm.segment_reduce(x, seg, 2, "mean").value, [[2, 2], [2, 2]])
    np.testing.assert_array_equal(cm.segment_reduce(x, seg, 2, "max").value, [[3, 5], [2, 2]])


def test_segment_reduce_contract():
    x = cm.constant(np.ones((3, 1)))
    with pytest.raises(cm.ContractError):
        cm.segment_reduce(x, [1, 0, 0], 2)
    with pytest.raises(cm.ContractError):
        cm.segment_reduce(x, [0, 0, 2], 3)


def naive_relational(x, w_self, w_rel, src, dst, rel):
    out = x @ w_self
    for v in range(x.shape[0]):
        for r, w in w_rel.items():
            nbrs = [s for s, d, rr in zip(src, dst, rel) if d == v and rr == r]
            if nbrs:
                out[v] += np.mean([x[u] for u in nbrs], axis=0) @ w
    return out


def random_multigraph(rng, n, n_rel, n_edges):
    src = rng.integers(0, n, n_edges)
    dst = rng.integers(0, n, n_edges)
    rel = rng.integers(0, n_rel, n_edges)
    return src, dst, rel


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 20), st.integers(0, 2**31))
def test_relational_conv_matches_double_loop(n, n_rel, n_edges, seed):
    rng = np.random.default_rng(seed)
    src, dst, rel = random_multigraph(rng, n, n_rel, n_edges)
    x = rng.normal(size=(n, 3))
    ws = rng.normal(size=(3, 2))
    wr = {r: rng.normal(size=(3, 2)) for r in range(n_rel)}
    plan = cm.RelationalPlan(src, dst, rel, n)
    got = cm.relational_conv(cm.constant(x), cm.constant(ws),
                             {r: cm.constant(w) for r, w in wr.items()}, plan).value
    np.testing.assert_allclose(got, naive_relational(x, ws, wr, src, dst, rel), rtol=0, atol=1e-12)


def test_grad_relational_conv():
    rng = np.random.default_rng(2)
    src, dst, rel = random_multigraph(rng, 5, 3, 12)
    plan = cm.RelationalPlan(src, dst, rel, 5)
    w = rng.normal(size=(5, 2))
    params = {"x": rng.normal(size=(5, 3)), "self": rng.normal(size=(3, 2))}
    params.update({f"r{r}": rng.normal(size=(3, 2)) for r in range(3)})
    fd_check(lambda t: cm.sum_all(cm.mul(cm.tanh(cm.relational_conv(
        t["x"], t["self"], {r: t[f"r{r}"] for r in range(3)}, plan)), cm.constant(w))), params)


def naive_lstm(x, wx, wh, b):
    H = wh.shape[0]
    h, c, out = np.zeros(H), np.zeros(H), []
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    for row in x:
        a = row @ wx + h @ wh + b.ravel()
        i, f, g, o = sig(a[:H]), sig(a[H:2 * H]), np.tanh(a[2 * H:3 * H]), sig(a[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_lstm_matches_naive_loop():
    rng = np.random.default_rng(4)
    x, wx, wh, b = (rng.normal(size=s) for s in [(6, 3), (3, 8), (2, 8), (1, 8)])
    got = cm.lstm_sequence(cm.constant(x), cm.constant(wx), cm.constant(wh), cm.constant(b)).value
    np.testing.assert_allclose(got, naive_lstm(x, wx, wh, b), rtol=1e-13, atol=1e-14)


def test_grad_lstm_single_step():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(1, 3))
    report = cm.grad_check(
        lambda t: cm.sum_all(cm.mul(cm.lstm_sequence(t["x"], t["wx"], t["wh"], t["b"]), cm.constant(w))),
        {"x": rng.normal(size=(1, 2)), "wx": rng.normal(size=(2, 12)),
         "wh": rng.normal(size=(3, 12)), "b": rng.normal(size=(1, 12))})
    assert max(report.values()) < 1e-5


def test_grad_lstm_sequence():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(5, 3))
    fd_check(lambda t: cm.sum_all(cm.mul(cm.lstm_sequence(t["x"], t["wx"], t["wh"], t["b"]), cm.constant(w))),
             {"x": rng.normal(size=(5, 2)), "wx": rng.normal(size=(2, 12)),
              "wh": rng.normal(size=(3, 12)), "b": rng.normal(size=(1, 12))})


def test_lstm_shape_error():
    with pytest.raises(cm.DimensionError):
        cm.lstm_sequence(cm.constant(np.ones((2, 3))), cm.constant(np.ones((3, 7))),
                         cm.constant(np.ones((2, 8))), cm.constant(np.ones((1, 8))))


# ---------------------------------------------------------------- dropout and grad_check contract

def test_grad_check_rejects_dropout():
    rng = np.random.default_rng(0)
    with pytest.raises(cm.ContractError):
        cm.grad_check(lambda t: cm.sum_all(cm.dropout(t["x"], 0.5, rng)),
                      {"x": np.arange(1.0, 17.0).reshape(4, 4) ** 1.5})


def test_dropout_zero_rate_is_identity_and_scaling_unbiased():
    x = cm.constant(np.ones((200, 50)))
    assert cm.dropout(x, 0.0, np.random.default_rng(0)) is x
    y = cm.dropout(x, 0.1, np.random.default_rng(0)).value
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}
    assert y.mean() == pytest.approx(1.0, abs=0.02)


def test_glorot_bounds():
    w = cm.glorot(np.random.default_rng(0), 10, 30)
    assert w.shape == (10, 30)
    assert np.abs(w).max() <= math.sqrt(6 / 40)
