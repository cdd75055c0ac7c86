"""Kernel ops against independent oracles and finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check
from longrec import tensors as T
from longrec.errors import DimensionError
from longrec.tensors import NEG_INF, Tensor


def triple_loop_matmul(a, b):
    m, p = a.shape
    p2, n = b.shape
    assert p == p2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(p):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def scalar_gelu(u):
    return 0.5 * u * (1.0 + math.tanh(math.sqrt(2.0 / math.pi)
                                      * (u + 0.044715 * u ** 3)))


# ----------------------------- matmul -----------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, -4.0]])
    out = T.matmul(np.eye(2), a)
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    assert np.abs(T.matmul(a, b).data - triple_loop_matmul(a, b)).max() <= 1e-12


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 16), p=st.integers(1, 16), n=st.integers(1, 16),
       seed=st.integers(0, 10_000))
def test_matmul_triple_loop_property(m, p, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, p))
    b = rng.normal(size=(p, n))
    assert np.abs(T.matmul(a, b).data - triple_loop_matmul(a, b)).max() <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_counter_is_exact():
    T.counter.reset()
    with T.count_muladds() as w:
        T.matmul(np.zeros((3, 4)), np.zeros((4, 5)))
        T.matmul(np.zeros((2, 7)), np.zeros((7, 2)))
        T.matmul_t(np.zeros((5, 6)), np.zeros((3, 6)))
    assert w.mul_adds == 3 * 4 * 5 + 2 * 7 * 2 + 5 * 6 * 3


def test_matmul_backward_exact():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    fd_check(lambda: T.bce(T.sigmoid(T.matmul(
        np.ones((1, 3)) * 0.2, T.matmul(T.matmul(a, b), np.ones((2, 1))))), 1.0),
        [("a", a), ("b", b)])


# ----------------------------- masked softmax -----------------------------


def test_softmax_uniform_row():
    out = T.masked_softmax(np.zeros((1, 3)), np.zeros((1, 3)))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_single_visible():
    out = T.masked_softmax(np.array([[5.0, 1.0]]), np.array([[0.0, NEG_INF]]))
    np.testing.assert_array_equal(out.data, [[1.0, 0.0]])


def test_softmax_matches_exp_normalize_oracle():
    row = np.array([[1.0, 2.0, 3.0]])
    e = np.exp(row - row.max())
    expected = e / e.sum()
    out = T.masked_softmax(row, np.zeros((1, 3)))
    assert np.abs(out.data - expected).max() <= 1e-12


def test_softmax_fully_masked_row_returns_zeros():
    out = T.masked_softmax(np.array([[4.0, 2.0]]), np.full((1, 2), NEG_INF))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0]])


def test_softmax_masked_positions_exact_zero_and_rows_sum_to_one():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(6, 9))
    mask = np.where(rng.random((6, 9)) < 0.4, NEG_INF, 0.0)
    mask[0] = NEG_INF          # one fully masked row
    mask[1] = 0.0              # one fully visible row
    out = T.masked_softmax(logits, mask).data
    assert (out[mask != 0.0] == 0.0).all()
    sums = out.sum(axis=1)
    assert abs(sums[0]) == 0.0
    visible_rows = (mask == 0.0).any(axis=1)
    np.testing.assert_allclose(sums[visible_rows], 1.0, atol=1e-12)


def test_softmax_exactly_ignores_masked_logits():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 5))
    mask = np.array([[0.0, NEG_INF, 0.0, NEG_INF, 0.0]] * 2)
    bumped = logits.copy()
    bumped[:, 1] = 1e6
    bumped[:, 3] = -1e6
    a = T.masked_softmax(logits, mask).data
    b = T.masked_softmax(bumped, mask).data
    np.testing.assert_array_equal(a, b)


def test_softmax_backward_fd():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    mask = np.where(rng.random((3, 5)) < 0.3, NEG_INF, 0.0)
    mask[:, 0] = 0.0  # keep every row alive
    w = rng.normal(size=(15, 1))

    def loss():
        probs = T.masked_softmax(x, mask)
        return T.bce(T.sigmoid(T.reshape(
            T.matmul(T.reshape(probs, (1, 15)), w), (1, 1))), 1.0)

    fd_check(loss, [("logits", x)])


# ----------------------------- layer norm -----------------------------


def test_layer_norm_constant_row_zeroes():
    out = T.layer_norm(np.full((2, 4), 3.3), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_layer_norm_already_normalized():
    out = T.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_fd():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    g = Tensor(rng.normal(size=8) + 1.0, requires_grad=True)
    b = Tensor(rng.normal(size=8), requires_grad=True)
    w = rng.normal(size=(8, 1))

    def loss():
        y = T.layer_norm(x, g, b)
        return T.bce(T.sigmoid(T.reshape(
            T.matmul(T.reshape(y, (1, 24)), np.ones((24, 1)) * 0.1), (1, 1))), 0.0)

    fd_check(loss, [("x", x), ("gain", g), ("bias", b)], tol=1e-4, h=1e-5)
    _ = w


# ----------------------------- ffn -----------------------------


def test_ffn_zero_weights_give_bias():
    D = 3
    x = np.random.default_rng(6).normal(size=(4, D))
    b2 = np.array([0.5, -1.0, 2.0])
    out = T.ffn(x, np.zeros((D, 4 * D)), np.zeros(4 * D), np.zeros((4 * D, D)), b2)
    np.testing.assert_allclose(out.data, np.tile(b2, (4, 1)), atol=1e-15)


def test_ffn_hand_arithmetic_oracle():
    # n=1, D=2: unroll the two affine maps and the tanh-form GELU by hand.
    x = np.array([[1.0, -2.0]])
    w1 = np.zeros((2, 8))
    w1[0, 0] = 1.0
    w1[1, 1] = -0.5
    b1 = np.full(8, 0.25)
    w2 = np.zeros((8, 2))
    w2[0, 0] = 2.0
    w2[1, 1] = -1.0
    w2[2, 0] = 0.5
    b2 = np.array([0.1, -0.2])
    h = [scalar_gelu(1.0 * 1.0 + 0.25),        # unit 0: x0*1 + 0.25
         scalar_gelu(-2.0 * -0.5 + 0.25)] + [scalar_gelu(0.25)] * 6
    expected = np.array([[2.0 * h[0] + 0.5 * h[2] + 0.1, -1.0 * h[1] - 0.2]])
    out = T.ffn(x, w1, b1, w2, b2)
    assert np.abs(out.data - expected).max() <= 1e-12


def test_ffn_shape_validation():
    with pytest.raises(DimensionError):
        T.ffn(np.zeros((2, 3)), np.zeros((3, 11)), np.zeros(11),
              np.zeros((11, 3)), np.zeros(3))


def test_ffn_fd():
    rng = np.random.default_rng(7)
    D = 3
    x = Tensor(rng.normal(size=(2, D)), requires_grad=True)
    w1 = Tensor(rng.normal(size=(D, 4 * D)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=4 * D) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(4 * D, D)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.normal(size=D) * 0.1, requires_grad=True)

    def loss():
        y = T.ffn(x, w1, b1, w2, b2)
        return T.bce(T.sigmoid(T.reshape(
            T.matmul(T.reshape(y, (1, 2 * D)), np.ones((2 * D, 1)) * 0.2),
            (1, 1))), 1.0)

    fd_check(loss, [("x", x), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)])


# ----------------------------- other ops -----------------------------


def test_gelu_sigmoid_fd():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def loss():
        y = T.gelu(x)
        return T.bce(T.sigmoid(T.reshape(
            T.matmul(T.reshape(y, (1, 6)), np.ones((6, 1)) * 0.3), (1, 1))), 0.0)

    fd_check(loss, [("x", x)])


def test_grouped_attention_matches_per_group_oracle():
    rng = np.random.default_rng(9)
    L, w, K = 6, 3, 2
    q, k, v = rng.normal(size=(3, L, w))
    out = T.grouped_attention(q, k, v, K).data
    for g in range(L // K):
        qs, ks, vs = (m[g * K:(g + 1) * K] for m in (q, k, v))
        s = qs @ ks.T / math.sqrt(w)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out[g * K:(g + 1) * K], p @ vs, atol=1e-12)


def test_grouped_attention_fd():
    rng = np.random.default_rng(10)
    L, w, K = 4, 3, 2
    q = Tensor(rng.normal(size=(L, w)), requires_grad=True)
    k = Tensor(rng.normal(size=(L, w)), requires_grad=True)
    v = Tensor(rng.normal(size=(L, w)), requires_grad=True)

    def loss():
        y = T.grouped_attention(q, k, v, K)
        return T.bce(T.sigmoid(T.reshape(
            T.matmul(T.reshape(y, (1, L * w)), np.ones((L * w, 1)) * 0.2),
            (1, 1))), 1.0)

    fd_check(loss, [("q", q), ("k", k), ("v", v)])


def test_structural_ops_fd():
    rng = np.random.default_rng(11)
    table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

    def loss():
        rows = T.gather_rows(table, np.array([0, 2, 2, 4]))   # duplicate index
        left = T.slice_cols(x, 0, 2)
        right = T.slice_cols(x, 2, 4)
        joined = T.concat_cols([T.concat_rows([left, right]),
                                T.slice_cols(rows, 0, 2)])
        pooled = T.mean_rows(joined)
        return T.bce(T.sigmoid(T.reshape(
            T.matmul(pooled, np.ones((4, 1))), (1, 1))), 1.0)

    fd_check(loss, [("table", table), ("x", x)])


def test_gather_rejects_out_of_range():
    t = Tensor(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        T.gather_rows(t, np.array([3]))
    with pytest.raises(IndexError):
        T.gather_rows(t, np.array([-1]))


# ----------------------------- bce -----------------------------


def test_bce_values():
    assert abs(float(T.bce(Tensor(np.array([[0.5]])), 1.0).data)
               - math.log(2.0)) <= 1e-12
    assert abs(float(T.bce(Tensor(np.array([[0.5]])), 0.0).data)
               - math.log(2.0)) <= 1e-12
    assert float(T.bce(Tensor(np.array([[1.0]])), 1.0).data) <= 1e-11
    assert float(T.bce(Tensor(np.array([[0.0]])), 0.0).data) <= 1e-11


def test_bce_grad_wrt_logit_is_p_minus_y():
    for z0, y in [(0.3, 1.0), (-1.2, 0.0), (2.0, 1.0)]:
        z = Tensor(np.array([[z0]]), requires_grad=True)
        p = T.sigmoid(z)
        loss = T.bce(p, y)
        loss.backward()
        expected = float(p.data.item()) - y
        grad = float(z.grad.item())
        assert abs(grad - expected) <= 1e-12
        # and agree with central differences
        h = 1e-6
        up = float(T.bce(T.sigmoid(Tensor(np.array([[z0 + h]]))), y).data)
        dn = float(T.bce(T.sigmoid(Tensor(np.array([[z0 - h]]))), y).data)
        assert abs((up - dn) / (2 * h) - grad) <= 1e-6


def test_counter_monotone_and_finite_outputs():
    T.counter.reset()
    before = T.counter.mul_adds
    rng = np.random.default_rng(12)
    out = T.matmul(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    assert T.counter.mul_adds >= before
    assert np.isfinite(out.data).all()
