"""Layer primitives against independent oracles and finite differences."""

import math

import numpy as np
import pytest

from conftest import clear_grads, gradcheck
from dystan.autodiff import Tensor, backward
from dystan.errors import ConfigError, DimensionError, UsageError
from dystan.nn import (
    GRU,
    LSTM,
    BatchNorm1d,
    BiLSTM,
    MultiHeadAttention,
    Parameter,
    adam_step,
    batchnorm1d,
    conv1d_same,
    dense,
)


def conv_oracle(x, w, b):
    """Sliding dot product with explicit zero padding."""
    batch, cin, t = x.shape
    cout, _, k = w.shape
    pad = (k - 1) // 2
    padded = np.zeros((batch, cin, t + 2 * pad))
    padded[:, :, pad : pad + t] = x
    out = np.zeros((batch, cout, t))
    for bi in range(batch):
        for o in range(cout):
            for ti in range(t):
                acc = 0.0
                for c in range(cin):
                    for ki in range(k):
                        acc += w[o, c, ki] * padded[bi, c, ti + ki]
                out[bi, o, ti] = acc + b[o]
    return out


class TestConv1d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 12))
        w = np.zeros((3, 3, 3))
        for c in range(3):
            w[c, c, 1] = 1.0
        out = conv1d_same(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_output_shape(self, rng):
        x = Tensor(rng.standard_normal((2, 13, 100)))
        w = Tensor(rng.standard_normal((64, 13, 7)))
        out = conv1d_same(x, w, Tensor(np.zeros(64)))
        assert out.shape == (2, 64, 100)

    def test_boxcar_kernel_values(self):
        out = conv1d_same(
            Tensor([[[1.0, 2.0, 3.0, 4.0]]]),
            Tensor(np.ones((1, 1, 3))),
            Tensor(np.zeros(1)),
        )
        assert np.allclose(out.data.ravel(), [3.0, 6.0, 9.0, 7.0], atol=1e-15)

    def test_matches_sliding_oracle(self, rng):
        x = rng.standard_normal((2, 4, 9))
        w = rng.standard_normal((5, 4, 5))
        b = rng.standard_normal(5)
        out = conv1d_same(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - conv_oracle(x, w, b)).max() < 1e-12

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv1d_same(
                Tensor(rng.standard_normal((1, 3, 8))),
                Tensor(rng.standard_normal((4, 2, 3))),
                Tensor(np.zeros(4)),
            )

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ConfigError):
            conv1d_same(
                Tensor(rng.standard_normal((1, 2, 8))),
                Tensor(rng.standard_normal((3, 2, 4))),
                Tensor(np.zeros(3)),
            )

    def test_sequence_shorter_than_kernel_rejected(self, rng):
        with pytest.raises(DimensionError):
            conv1d_same(
                Tensor(rng.standard_normal((1, 2, 2)),),
                Tensor(rng.standard_normal((3, 2, 3))),
                Tensor(np.zeros(3)),
            )

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        proj = rng.standard_normal((2, 4, 8))

        def f():
            clear_grads(x, w, b)
            return (conv1d_same(x, w, b) * Tensor(proj)).sum()

        assert gradcheck(f, [x, w, b]) < 1e-4


class TestBatchNorm1d:
    def test_constant_channel_gives_beta(self, rng):
        bn = BatchNorm1d(3)
        bn.beta.data = np.array([1.5, -2.0, 0.25])
        x = Tensor(np.tile(np.array([4.0, -1.0, 7.0])[None, :, None], (2, 1, 5)))
        out = bn(x, train=True)
        for c, beta in enumerate(bn.beta.data):
            assert np.abs(out.data[:, c, :] - beta).max() < 1e-9

    def test_train_normalizes(self, rng):
        bn = BatchNorm1d(4)
        x = Tensor(rng.standard_normal((8, 4, 20)) * 3.0 + 2.0)
        out = bn(x, train=True).data
        assert np.abs(out.mean(axis=(0, 2))).max() < 1e-9
        assert np.abs(out.var(axis=(0, 2)) - 1.0).max() < 1e-4  # eps-deflated

    def test_eval_identity_statistics(self, rng):
        bn = BatchNorm1d(3, eps=1e-5)
        x = Tensor(rng.standard_normal((2, 3, 6)))
        out = bn(x, train=False)
        assert np.abs(out.data - x.data / np.sqrt(1.0 + 1e-5)).max() < 1e-12

    def test_eps_validation(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        with pytest.raises(ConfigError):
            batchnorm1d(
                x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                eps=0.0, momentum=0.1, train=True,
                running_mean=np.zeros(3), running_var=np.ones(3),
            )

    def test_single_sample_train_rejected(self):
        bn = BatchNorm1d(2)
        with pytest.raises(UsageError):
            bn(Tensor(np.ones((1, 2, 1))), train=True)

    def test_running_stats_updated(self, rng):
        bn = BatchNorm1d(2, momentum=0.1)
        x = Tensor(rng.standard_normal((4, 2, 10)) + 5.0)
        bn(x, train=True)
        expected_mean = 0.1 * x.data.mean(axis=(0, 2))
        assert np.abs(bn.running_mean.data - expected_mean).max() < 1e-12

    def test_gradients_train_and_eval(self, rng):
        bn = BatchNorm1d(3)
        x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
        proj = rng.standard_normal((2, 3, 5))
        for train in (True, False):
            def f(train=train):
                clear_grads(x, bn.gamma.tensor, bn.beta.tensor)
                bn.running_mean.data = np.zeros(3)
                bn.running_var.data = np.ones(3)
                return (bn(x, train=train) * Tensor(proj)).sum()

            assert gradcheck(f, [x, bn.gamma.tensor, bn.beta.tensor]) < 1e-4


class TestDense:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out = dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, x)

    def test_affine_arithmetic(self):
        out = dense(
            Tensor([[1.0, 2.0]]),
            Tensor([[1.0, 0.0], [0.0, 1.0]]),
            Tensor([3.0, 4.0]),
        )
        assert np.array_equal(out.data, [[4.0, 6.0]])

    def test_matches_triple_loop_oracle(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 2))
        b = rng.standard_normal(2)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = 0.0
                for k in range(5):
                    acc += x[i, k] * w[k, j]
                expected[i, j] = acc + b[j]
        out = dense(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - expected).max() < 1e-12

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            dense(
                Tensor(rng.standard_normal((2, 3))),
                Tensor(rng.standard_normal((4, 2))),
                Tensor(np.zeros(2)),
            )

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        proj = rng.standard_normal((3, 2))

        def f():
            clear_grads(x, w, b)
            return (dense(x, w, b) * Tensor(proj)).sum()

        assert gradcheck(f, [x, w, b]) < 1e-4


def lstm_oracle(x, wx, wh, b, reverse=False):
    """Step-by-step scalar-loop LSTM; gate order (input, forget, cand, out)."""
    batch, t_len, _ = x.shape
    hidden = wh.shape[0]
    out = np.zeros((batch, t_len, hidden))
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    for bi in range(batch):
        h = np.zeros(hidden)
        c = np.zeros(hidden)
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in steps:
            z = x[bi, t] @ wx + h @ wh + b
            for j in range(hidden):
                i_g = sig(z[j])
                f_g = sig(z[hidden + j])
                g_g = math.tanh(z[2 * hidden + j])
                o_g = sig(z[3 * hidden + j])
                c[j] = f_g * c[j] + i_g * g_g
                h[j] = o_g * math.tanh(c[j])
            out[bi, t] = h
    return out


class TestLstm:
    def test_zero_everything_gives_zero(self):
        lstm = LSTM(2, 3, np.random.default_rng(0))
        for p in lstm.parameters():
            p.data = np.zeros_like(p.data)
        out = lstm(Tensor(np.zeros((2, 5, 2))))
        assert np.array_equal(out.data, np.zeros((2, 5, 3)))

    def test_bilstm_output_shape(self, rng):
        bilstm = BiLSTM(128, 128, rng)
        out = bilstm(Tensor(rng.standard_normal((4, 100, 128))))
        assert out.shape == (4, 100, 256)

    def test_matches_unrolled_oracle(self, rng):
        lstm = LSTM(2, 2, np.random.default_rng(5))
        x = rng.standard_normal((2, 3, 2))
        got = lstm(Tensor(x)).data
        expected = lstm_oracle(x, lstm.wx.data, lstm.wh.data, lstm.b.data)
        assert np.abs(got - expected).max() < 1e-12

        rev = LSTM(2, 2, np.random.default_rng(6), reverse=True)
        got = rev(Tensor(x)).data
        expected = lstm_oracle(x, rev.wx.data, rev.wh.data, rev.b.data, reverse=True)
        assert np.abs(got - expected).max() < 1e-12

    def test_forget_bias_initialized_open(self):
        lstm = LSTM(4, 8, np.random.default_rng(3))
        assert np.array_equal(lstm.b.data[8:16], np.ones(8))

    def test_gradients(self, rng):
        bilstm = BiLSTM(2, 2, np.random.default_rng(7))
        x = Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
        proj = rng.standard_normal((2, 4, 4))
        params = [p.tensor for p in bilstm.parameters()]

        def f():
            clear_grads(x, *params)
            return (bilstm(x) * Tensor(proj)).sum()

        assert gradcheck(f, [x] + params) < 1e-4


class TestGru:
    def test_gradients(self, rng):
        gru = GRU(3, 2, np.random.default_rng(8))
        x = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        proj = rng.standard_normal((2, 4, 2))
        params = [p.tensor for p in gru.parameters()]

        def f():
            clear_grads(x, *params)
            return (gru(x) * Tensor(proj)).sum()

        assert gradcheck(f, [x] + params) < 1e-4

    def test_zero_everything_gives_zero(self):
        gru = GRU(2, 3, np.random.default_rng(0))
        for p in gru.parameters():
            p.data = np.zeros_like(p.data)
        out = gru(Tensor(np.zeros((1, 4, 2))))
        assert np.array_equal(out.data, np.zeros((1, 4, 3)))


def mha_oracle(q_in, kv_in, attn):
    """Explicit per-head loop with the layer's projection parameters."""
    heads = attn.heads
    dim = attn.dim
    head_dim = dim // heads
    q = q_in @ attn.wq.data + attn.bq.data
    k = kv_in @ attn.wk.data + attn.bk.data
    v = kv_in @ attn.wv.data + attn.bv.data
    batch, tq, _ = q.shape
    tkv = k.shape[1]
    merged = np.zeros((batch, tq, dim))
    for bi in range(batch):
        for h in range(heads):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            qh, kh, vh = q[bi, :, sl], k[bi, :, sl], v[bi, :, sl]
            scores = qh @ kh.T / math.sqrt(head_dim)
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            merged[bi, :, sl] = w @ vh
    return merged @ attn.wo.data + attn.bo.data


class TestMultiHeadAttention:
    def test_single_kv_position(self, rng):
        # softmax over one element is exactly 1: every query sees the same
        # projected value row
        attn = MultiHeadAttention(8, 2, np.random.default_rng(1))
        q_in = rng.standard_normal((2, 5, 8))
        kv_in = rng.standard_normal((2, 1, 8))
        out = attn(Tensor(q_in), Tensor(kv_in)).data
        v = kv_in @ attn.wv.data + attn.bv.data
        expected = np.repeat(v, 5, axis=1) @ attn.wo.data + attn.bo.data
        assert np.abs(out - expected).max() < 1e-12

    def test_zero_key_projection_gives_uniform_weights(self, rng):
        attn = MultiHeadAttention(8, 2, np.random.default_rng(2))
        attn.wk.data = np.zeros_like(attn.wk.data)
        attn.bk.data = np.zeros_like(attn.bk.data)
        q_in = rng.standard_normal((1, 6, 8))
        kv_in = rng.standard_normal((1, 6, 8))
        out = attn(Tensor(q_in), Tensor(kv_in)).data
        v = kv_in @ attn.wv.data + attn.bv.data
        expected = np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape)
        expected = expected @ attn.wo.data + attn.bo.data
        assert np.abs(out - expected).max() < 1e-12

    def test_matches_per_head_oracle(self, rng):
        attn = MultiHeadAttention(8, 2, np.random.default_rng(3))
        q_in = rng.standard_normal((1, 4, 8))
        kv_in = rng.standard_normal((1, 4, 8))
        out = attn(Tensor(q_in), Tensor(kv_in)).data
        assert np.abs(out - mha_oracle(q_in, kv_in, attn)).max() < 1e-12

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 4, np.random.default_rng(0))

    def test_gradients(self, rng):
        attn = MultiHeadAttention(4, 2, np.random.default_rng(4))
        q_in = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        kv_in = Tensor(rng.standard_normal((1, 2, 4)), requires_grad=True)
        proj = rng.standard_normal((1, 3, 4))
        params = [p.tensor for p in attn.parameters()]

        def f():
            clear_grads(q_in, kv_in, *params)
            return (attn(q_in, kv_in) * Tensor(proj)).sum()

        assert gradcheck(f, [q_in, kv_in] + params) < 1e-4


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.tensor.grad = np.zeros(2)
        adam_step([p], lr=0.1)
        assert np.array_equal(p.data, [1.0, -2.0])
        assert np.array_equal(p.adam_m, np.zeros(2))
        assert np.array_equal(p.adam_v, np.zeros(2))
        assert p.step_count == 1

    def test_first_step_moves_lr_against_gradient(self):
        p = Parameter(np.array([0.5]))
        p.tensor.grad = np.array([3.0])
        adam_step([p], lr=0.01)
        # bias-corrected first step: lr * g / (|g| + eps') ~ lr, sign -g
        assert abs((0.5 - p.data[0]) - 0.01) < 1e-9

    def test_three_steps_match_scalar_oracle(self):
        p = Parameter(np.array([1.0]))
        w, m, v = 1.0, 0.0, 0.0
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        for t in range(1, 4):
            loss = (p.tensor * p.tensor).sum()
            backward(loss)
            adam_step([p], lr=lr)
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p.data[0] - w) < 1e-12
        assert p.step_count == 3

    def test_missing_gradient_rejected(self):
        p = Parameter(np.array([1.0]), name="w")
        with pytest.raises(UsageError):
            adam_step([p], lr=0.1)

    def test_gradients_cleared_after_step(self):
        p = Parameter(np.array([1.0]))
        backward((p.tensor * p.tensor).sum())
        adam_step([p], lr=0.1)
        assert p.tensor.grad is None
