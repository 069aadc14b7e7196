import numpy as np
import pytest

from sacn import tensor as T
from sacn.attention import (AttentionBlockParams, attention_forward, attention_map,
                            attention_output, attention_scores, export_attention,
                            reduced_channels)
from sacn.nn import power_iteration
from sacn.tensor import Rng, Tensor

from conftest import check_grads


def make_block(channels=8, seed=0, alpha=0.0, dtype=np.float64):
    with T.precision(dtype):
        p = AttentionBlockParams.create(channels, Rng(seed))
    for w, st in ((p.w_f, p.sn_f), (p.w_g, p.sn_g), (p.w_h, p.sn_h)):
        power_iteration(w.data, st)
    p.alpha.data[:] = alpha
    return p


def brute_force(x, p, axis="i"):
    """Nested-loop evaluation of the block for one (C, H, W) map."""
    c, h, w = x.shape
    n = h * w
    flat = x.reshape(c, n)
    wf = p.w_f.data[:, :, 0, 0] / p.sn_f.sigma
    wg = p.w_g.data[:, :, 0, 0] / p.sn_g.sigma
    wh = p.w_h.data[:, :, 0, 0] / p.sn_h.sigma
    eta = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            eta[i, j] = sum((wf @ flat[:, i])[k] * (wg @ flat[:, j])[k]
                            for k in range(wf.shape[0]))
    beta = np.zeros((n, n))
    for j in range(n):
        for i in range(n):
            if axis == "i":
                beta[i, j] = np.exp(eta[i, j]) / sum(np.exp(eta[k, j]) for k in range(n))
            else:
                beta[i, j] = np.exp(eta[i, j]) / sum(np.exp(eta[i, k]) for k in range(n))
    o = np.zeros((c, n))
    for j in range(n):
        for i in range(n):
            o[:, j] += beta[i, j] * (wh @ flat[:, i])
    y = p.alpha.data[0] * o + flat
    return eta, beta, o, y


def test_reduced_channels():
    assert reduced_channels(64) == 8
    assert reduced_channels(12) == 1
    assert reduced_channels(4) == 1


@pytest.mark.parametrize("axis", ["i", "j"])
def test_forward_matches_nested_loops(axis):
    p = make_block(alpha=0.7)
    x = np.random.default_rng(1).normal(size=(2, 8, 2, 2))
    with T.precision(np.float64):
        y, inter = attention_forward(Tensor(x), p, softmax_axis=axis, keep_intermediates=True)
    for b in range(2):
        eta, beta, o, yy = brute_force(x[b], p, axis)
        np.testing.assert_allclose(inter.eta[b], eta, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(inter.beta[b], beta, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(inter.o[b], o, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(y.data[b].reshape(8, 4), yy, rtol=1e-10, atol=1e-12)


def test_scores_zero_projection_and_single_location():
    f = Tensor(np.zeros((1, 2, 5)))
    g = Tensor(np.random.default_rng(0).normal(size=(1, 2, 5)))
    np.testing.assert_array_equal(attention_scores(f, g).data, np.zeros((1, 5, 5)))
    one = attention_map(attention_scores(Tensor(np.array([[[2.0]]])), Tensor(np.array([[[-3.0]]]))))
    np.testing.assert_array_equal(one.data, [[[1.0]]])


def test_map_examples():
    beta = attention_map(Tensor(np.zeros((1, 4, 4)))).data
    np.testing.assert_allclose(beta, np.full((1, 4, 4), 0.25))
    col = attention_map(Tensor(np.array([[[0.0, 0.0], [np.log(3.0), 0.0]]]))).data
    np.testing.assert_allclose(col[0, :, 0], [0.25, 0.75])
    eta = np.random.default_rng(2).normal(size=(2, 6, 6)) * 5
    np.testing.assert_allclose(attention_map(Tensor(eta)).data.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        attention_map(Tensor(eta), "k")


def test_output_examples():
    h = np.random.default_rng(3).normal(size=(1, 3, 4))
    uniform = attention_output(Tensor(np.full((1, 4, 4), 0.25)), Tensor(h)).data
    np.testing.assert_allclose(uniform, np.repeat(h.mean(axis=2, keepdims=True), 4, axis=2))
    perm = np.eye(4)[None]
    np.testing.assert_allclose(attention_output(Tensor(perm), Tensor(h)).data, h)


def test_alpha_zero_is_identity_bitwise():
    p = make_block(alpha=0.0, dtype=np.float32)
    x = np.random.default_rng(4).normal(size=(3, 8, 4, 4)).astype(np.float32)
    y, _ = attention_forward(Tensor(x), p)
    assert np.array_equal(y.data, x)


def test_alpha_one_zero_value_projection_is_identity():
    p = make_block(alpha=1.0)
    p.w_h.data[:] = 0.0
    x = np.random.default_rng(5).normal(size=(1, 8, 3, 3))
    with T.precision(np.float64):
        y, _ = attention_forward(Tensor(x), p)
    np.testing.assert_array_equal(y.data, x)


def test_alpha_half_substitution():
    p = make_block(alpha=0.5)
    x = np.random.default_rng(6).normal(size=(1, 8, 3, 3))
    with T.precision(np.float64):
        y, inter = attention_forward(Tensor(x), p, keep_intermediates=True)
    np.testing.assert_allclose(inter.y[0], 0.5 * inter.o[0] + x[0].reshape(8, 9), rtol=1e-12)


def test_block_gradients(f64):
    p = make_block(alpha=0.6)
    x0 = np.random.default_rng(7).normal(size=(2, 8, 3, 3))

    def build(x, wf, wg, wh, a):
        q = AttentionBlockParams(wf, wg, wh, a, p.sn_f, p.sn_g, p.sn_h)
        return attention_forward(x, q)[0]

    check_grads(build, [x0, p.w_f.data.copy(), p.w_g.data.copy(), p.w_h.data.copy(),
                        np.array([0.6])])


def test_alpha_gradient_is_inner_product_with_o(f64):
    p = make_block(alpha=0.3)
    x = Tensor(np.random.default_rng(8).normal(size=(2, 8, 3, 3)))
    r = np.random.default_rng(9).normal(size=(2, 8, 3, 3))
    y, inter = attention_forward(x, p, keep_intermediates=True)
    (y * Tensor(r)).sum().backward()
    expected = np.sum(inter.o * r.reshape(2, 8, 9))
    assert p.alpha.grad[0] == pytest.approx(expected, rel=1e-10)


def test_permutation_equivariance():
    p = make_block(alpha=0.8)
    x = np.random.default_rng(10).normal(size=(1, 8, 3, 3))
    perm = np.random.default_rng(11).permutation(9)
    xp = x.reshape(1, 8, 9)[:, :, perm].reshape(1, 8, 3, 3)
    with T.precision(np.float64):
        y, _ = attention_forward(Tensor(x), p)
        yp, _ = attention_forward(Tensor(xp), p)
    np.testing.assert_allclose(yp.data.reshape(1, 8, 9), y.data.reshape(1, 8, 9)[:, :, perm],
                               rtol=1e-10, atol=1e-12)


def test_channel_mismatch_rejected():
    p = make_block(channels=8)
    with pytest.raises(ValueError, match="channels"):
        attention_forward(Tensor(np.ones((1, 16, 2, 2))), p)


def test_export_attention():
    flat = export_attention(np.full((4, 4), 0.25), 2, 2, 2)
    np.testing.assert_array_equal(flat, np.zeros((2, 2)))
    onehot = np.eye(4)
    img = export_attention(onehot, 1, 2, 2)
    np.testing.assert_array_equal(img, [[0.0, 1.0], [0.0, 0.0]])
    beta = np.random.default_rng(12).random((6, 6))
    col = beta[:, 4].reshape(2, 3)
    np.testing.assert_allclose(export_attention(beta, 4, 2, 3),
                               (col - col.min()) / (col.max() - col.min()))
    with pytest.raises(IndexError):
        export_attention(beta, 6, 2, 3)
