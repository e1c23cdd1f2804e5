"""Neural-network layer primitives on top of the autodiff core.

Layers that dominate runtime (conv, batch norm, recurrent cells) are fused
graph nodes with analytically derived backward passes; everything else is
composed from elementwise primitives. All backward passes are verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    Function,
    Tensor,
    concat,
    dropout,
    relu,
    softmax,
)
from .errors import ConfigError, DimensionError, UsageError

__all__ = [
    "Parameter",
    "Module",
    "Conv1d",
    "BatchNorm1d",
    "Dense",
    "BiLSTM",
    "LSTM",
    "GRU",
    "MultiHeadAttention",
    "conv1d_same",
    "batchnorm1d",
    "dense",
    "adam_step",
    "dropout",
    "relu",
    "softmax",
]


class Parameter:
    """A named, trainable tensor with its Adam moment buffers."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v", "step_count", "trainable")

    def __init__(self, data, name="", trainable=True):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0
        self.trainable = trainable

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Module:
    """Container tracking parameters through attribute paths.

    Attribute order is definition order, so parameter enumeration (and hence
    initialization, optimization and checkpoint layout) is deterministic.
    """

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = prefix + attr
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None

    def state_arrays(self):
        """name -> array snapshot of every parameter (copies)."""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise UsageError(f"state is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {state[name].shape} "
                    f"!= model shape {p.data.shape}"
                )
            p.data = state[name].copy()


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


# -- convolution --------------------------------------------------------------


class _Conv1dFn(Function):
    """Same-padded stride-1 1-d convolution (cross-correlation layout)."""

    def forward(self, x, w, b):
        if x.ndim != 3 or w.ndim != 3:
            raise DimensionError("conv1d_same expects x (B,C,T) and weights (O,C,K)")
        B, Cin, T = x.shape
        Cout, Cin_w, K = w.shape
        if Cin != Cin_w:
            raise DimensionError(f"input has {Cin} channels, weights expect {Cin_w}")
        if K % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {K}")
        if T < K:
            raise DimensionError(f"sequence length {T} shorter than kernel {K}")
        pad = (K - 1) // 2
        xp = np.zeros((B, Cin, T + 2 * pad))
        xp[:, :, pad : pad + T] = x
        win = sliding_window_view(xp, K, axis=2)  # (B, Cin, T, K)
        win2 = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * T, Cin * K)
        y = win2 @ w.reshape(Cout, Cin * K).T + b
        self.win2 = win2
        self.w = w
        self.dims = (B, Cin, T, Cout, K, pad)
        return np.ascontiguousarray(y.reshape(B, T, Cout).transpose(0, 2, 1))

    def backward(self, grad):
        B, Cin, T, Cout, K, pad = self.dims
        gy2 = np.ascontiguousarray(grad.transpose(0, 2, 1)).reshape(B * T, Cout)
        dw = (gy2.T @ self.win2).reshape(Cout, Cin, K)
        db = gy2.sum(axis=0)
        dwin = (gy2 @ self.w.reshape(Cout, Cin * K)).reshape(B, T, Cin, K)
        dxp = np.zeros((B, Cin, T + 2 * pad))
        for k in range(K):
            dxp[:, :, k : k + T] += dwin[:, :, :, k].transpose(0, 2, 1)
        return dxp[:, :, pad : pad + T], dw, db


def conv1d_same(x, w, b):
    """y[b,o,t] = sum_{c,k} w[o,c,k] * x[b,c,t+k-(K-1)/2] + b[o], zero-padded."""
    return _Conv1dFn.apply(x, w, b)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng):
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.w = Parameter(_uniform(rng, bound, (out_channels, in_channels, kernel_size)))
        self.b = Parameter(_uniform(rng, bound, (out_channels,)))

    def __call__(self, x):
        return conv1d_same(x, self.w.tensor, self.b.tensor)


# -- batch normalization -------------------------------------------------------


class _BatchNorm1dFn(Function):
    def forward(self, x, gamma, beta, eps, momentum, train, running_mean, running_var):
        if x.ndim != 3:
            raise DimensionError("batchnorm1d expects (B, C, T) input")
        B, C, T = x.shape
        if train:
            n = B * T
            if n < 2:
                raise UsageError("train-mode batch norm needs B*T >= 2")
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1))
        else:
            mean = running_mean
            var = running_var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        self.xhat = xhat
        self.inv = inv
        self.gamma = gamma
        self.train = train
        return gamma[None, :, None] * xhat + beta[None, :, None]

    def backward(self, grad):
        xhat, inv, gamma = self.xhat, self.inv, self.gamma
        dbeta = grad.sum(axis=(0, 2))
        dgamma = (grad * xhat).sum(axis=(0, 2))
        if self.train:
            n = grad.shape[0] * grad.shape[2]
            scale = (gamma * inv / n)[None, :, None]
            dx = scale * (n * grad - dbeta[None, :, None] - xhat * dgamma[None, :, None])
        else:
            dx = grad * (gamma * inv)[None, :, None]
        return dx, dgamma, dbeta


def batchnorm1d(x, gamma, beta, eps, momentum, train, running_mean, running_var):
    """Per-channel normalization over batch and time.

    Train mode normalizes with batch statistics and folds them into the
    running buffers (mutated in place); eval mode uses the running buffers.
    """
    if eps <= 0:
        raise ConfigError(f"batch norm eps must be > 0, got {eps}")
    return _BatchNorm1dFn.apply(
        x,
        gamma,
        beta,
        eps=eps,
        momentum=momentum,
        train=train,
        running_mean=running_mean,
        running_var=running_var,
    )


class BatchNorm1d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Parameter(np.zeros(channels), trainable=False)
        self.running_var = Parameter(np.ones(channels), trainable=False)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, train):
        return batchnorm1d(
            x,
            self.gamma.tensor,
            self.beta.tensor,
            self.eps,
            self.momentum,
            train,
            self.running_mean.data,
            self.running_var.data,
        )


# -- dense ---------------------------------------------------------------------


def dense(x, w, b):
    """Affine map y = x @ w + b for x (B, D), w (D, E), b (E,)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"dense: input dim {x.shape[-1]} != weight rows {w.shape[0]}"
        )
    return x @ w + b


class Dense(Module):
    def __init__(self, in_dim, out_dim, rng):
        bound = 1.0 / np.sqrt(in_dim)
        self.w = Parameter(_uniform(rng, bound, (in_dim, out_dim)))
        self.b = Parameter(_uniform(rng, bound, (out_dim,)))

    def __call__(self, x):
        return dense(x, self.w.tensor, self.b.tensor)


# -- recurrent cells -----------------------------------------------------------


class _LstmSeqFn(Function):
    """Full LSTM pass over a sequence, one graph node.

    Gate layout along the 4H axis is (input, forget, candidate, output).
    Backward is truncated nowhere: full BPTT over all T steps.
    """

    def forward(self, x, wx, wh, b, reverse):
        B, T, D = x.shape
        H = wh.shape[0]
        pre = (x.reshape(B * T, D) @ wx).reshape(B, T, 4 * H) + b
        order = range(T - 1, -1, -1) if reverse else range(T)
        gates = np.empty((T, B, 4 * H))
        cs = np.empty((T, B, H))
        tcs = np.empty((T, B, H))
        hs = np.empty((T, B, H))
        out = np.empty((B, T, H))
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        for step, t in enumerate(order):
            z = pre[:, t, :] + h @ wh
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = _sigmoid(z[:, 3 * H :])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gates[step, :, :H] = i
            gates[step, :, H : 2 * H] = f
            gates[step, :, 2 * H : 3 * H] = g
            gates[step, :, 3 * H :] = o
            cs[step] = c
            tcs[step] = tc
            hs[step] = h
            out[:, t, :] = h
        self.x = x
        self.wx = wx
        self.wh = wh
        self.order = list(order)
        self.caches = (gates, cs, tcs, hs)
        return out

    def backward(self, grad):
        x, wx, wh = self.x, self.wx, self.wh
        gates, cs, tcs, hs = self.caches
        B, T, D = x.shape
        H = wh.shape[0]
        dpre = np.empty((B, T, 4 * H))
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        dz = np.empty((B, 4 * H))
        for step in range(T - 1, -1, -1):
            t = self.order[step]
            i = gates[step, :, :H]
            f = gates[step, :, H : 2 * H]
            g = gates[step, :, 2 * H : 3 * H]
            o = gates[step, :, 3 * H :]
            tc = tcs[step]
            c_prev = cs[step - 1] if step > 0 else 0.0
            h_prev = hs[step - 1] if step > 0 else None
            dh = grad[:, t, :] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            if h_prev is not None:
                dwh += h_prev.T @ dz
            dh_next = dz @ wh.T
            dpre[:, t, :] = dz
        dpre2 = dpre.reshape(B * T, 4 * H)
        dwx = x.reshape(B * T, D).T @ dpre2
        db = dpre2.sum(axis=0)
        dx = (dpre2 @ wx.T).reshape(B, T, D)
        return dx, dwx, dwh, db


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class LSTM(Module):
    """Single-direction LSTM; returns the hidden sequence (B, T, H)."""

    def __init__(self, in_dim, hidden, rng, reverse=False):
        bound = 1.0 / np.sqrt(hidden)
        self.wx = Parameter(_uniform(rng, bound, (in_dim, 4 * hidden)))
        self.wh = Parameter(_uniform(rng, bound, (hidden, 4 * hidden)))
        b = _uniform(rng, bound, (4 * hidden,))
        b[hidden : 2 * hidden] = 1.0  # forget gate opens at init
        self.b = Parameter(b)
        self.hidden = hidden
        self.reverse = reverse

    def __call__(self, x):
        if x.ndim != 3 or x.shape[1] < 1:
            raise DimensionError("lstm expects (B, T>=1, D) input")
        return _LstmSeqFn.apply(
            x, self.wx.tensor, self.wh.tensor, self.b.tensor, reverse=self.reverse
        )


class BiLSTM(Module):
    """Concatenated forward and backward hidden sequences: (B, T, 2H)."""

    def __init__(self, in_dim, hidden, rng):
        self.fwd = LSTM(in_dim, hidden, rng, reverse=False)
        self.bwd = LSTM(in_dim, hidden, rng, reverse=True)

    def __call__(self, x):
        return concat([self.fwd(x), self.bwd(x)], axis=2)


class _GruSeqFn(Function):
    """GRU pass over a sequence; gate layout (reset, update, candidate)."""

    def forward(self, x, wx, wh, b):
        B, T, D = x.shape
        H = wh.shape[0]
        pre = (x.reshape(B * T, D) @ wx).reshape(B, T, 3 * H) + b
        rs = np.empty((T, B, H))
        zs = np.empty((T, B, H))
        ns = np.empty((T, B, H))
        hwn = np.empty((T, B, H))
        hs = np.empty((T, B, H))
        out = np.empty((B, T, H))
        h = np.zeros((B, H))
        for t in range(T):
            hw = h @ wh
            r = _sigmoid(pre[:, t, :H] + hw[:, :H])
            z = _sigmoid(pre[:, t, H : 2 * H] + hw[:, H : 2 * H])
            n = np.tanh(pre[:, t, 2 * H :] + r * hw[:, 2 * H :])
            h = (1.0 - z) * n + z * h
            rs[t], zs[t], ns[t], hwn[t], hs[t] = r, z, n, hw[:, 2 * H :], h
            out[:, t, :] = h
        self.x = x
        self.wx = wx
        self.wh = wh
        self.caches = (rs, zs, ns, hwn, hs)
        return out

    def backward(self, grad):
        x, wx, wh = self.x, self.wx, self.wh
        rs, zs, ns, hwn, hs = self.caches
        B, T, D = x.shape
        H = wh.shape[0]
        dpre = np.empty((B, T, 3 * H))
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((B, H))
        dhw = np.empty((B, 3 * H))
        for t in range(T - 1, -1, -1):
            r, z, n = rs[t], zs[t], ns[t]
            h_prev = hs[t - 1] if t > 0 else np.zeros((B, H))
            dh = grad[:, t, :] + dh_next
            dzg = dh * (h_prev - n)
            dn = dh * (1.0 - z)
            dh_prev = dh * z
            dnpre = dn * (1.0 - n * n)
            drpre = dnpre * hwn[t] * r * (1.0 - r)
            dzpre = dzg * z * (1.0 - z)
            dhw[:, :H] = drpre
            dhw[:, H : 2 * H] = dzpre
            dhw[:, 2 * H :] = dnpre * r
            dwh += h_prev.T @ dhw
            dh_next = dh_prev + dhw @ wh.T
            dpre[:, t, :H] = drpre
            dpre[:, t, H : 2 * H] = dzpre
            dpre[:, t, 2 * H :] = dnpre
        dpre2 = dpre.reshape(B * T, 3 * H)
        dwx = x.reshape(B * T, D).T @ dpre2
        db = dpre2.sum(axis=0)
        dx = (dpre2 @ wx.T).reshape(B, T, D)
        return dx, dwx, dwh, db


class GRU(Module):
    def __init__(self, in_dim, hidden, rng):
        bound = 1.0 / np.sqrt(hidden)
        self.wx = Parameter(_uniform(rng, bound, (in_dim, 3 * hidden)))
        self.wh = Parameter(_uniform(rng, bound, (hidden, 3 * hidden)))
        self.b = Parameter(_uniform(rng, bound, (3 * hidden,)))
        self.hidden = hidden

    def __call__(self, x):
        if x.ndim != 3:
            raise DimensionError("gru expects (B, T, D) input")
        return _GruSeqFn.apply(x, self.wx.tensor, self.wh.tensor, self.b.tensor)


# -- attention -----------------------------------------------------------------


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned Q/K/V/output projections.

    Queries come from one sequence, keys and values from another; softmax
    runs over the key/value time axis with scale 1/sqrt(D/heads).
    """

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        bound = 1.0 / np.sqrt(dim)
        self.wq = Parameter(_uniform(rng, bound, (dim, dim)))
        self.bq = Parameter(_uniform(rng, bound, (dim,)))
        self.wk = Parameter(_uniform(rng, bound, (dim, dim)))
        self.bk = Parameter(_uniform(rng, bound, (dim,)))
        self.wv = Parameter(_uniform(rng, bound, (dim, dim)))
        self.bv = Parameter(_uniform(rng, bound, (dim,)))
        self.wo = Parameter(_uniform(rng, bound, (dim, dim)))
        self.bo = Parameter(_uniform(rng, bound, (dim,)))
        self.dim = dim
        self.heads = heads

    def _split_heads(self, x, B, T):
        head_dim = self.dim // self.heads
        return x.reshape(B, T, self.heads, head_dim).transpose(0, 2, 1, 3)

    def __call__(self, q_in, kv_in):
        if q_in.ndim != 3 or kv_in.ndim != 3:
            raise DimensionError("attention expects (B, T, D) inputs")
        if q_in.shape[0] != kv_in.shape[0] or q_in.shape[2] != kv_in.shape[2]:
            raise DimensionError(
                f"attention batch/feature dims disagree: {q_in.shape} vs {kv_in.shape}"
            )
        if q_in.shape[2] != self.dim:
            raise DimensionError(f"expected feature dim {self.dim}, got {q_in.shape[2]}")
        B, Tq, _ = q_in.shape
        Tkv = kv_in.shape[1]
        head_dim = self.dim // self.heads

        q = self._split_heads(dense(q_in, self.wq.tensor, self.bq.tensor), B, Tq)
        k = self._split_heads(dense(kv_in, self.wk.tensor, self.bk.tensor), B, Tkv)
        v = self._split_heads(dense(kv_in, self.wv.tensor, self.bv.tensor), B, Tkv)

        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
        weights = softmax(scores, axis=-1)
        mixed = weights @ v  # (B, heads, Tq, head_dim)
        merged = mixed.transpose(0, 2, 1, 3).reshape(B, Tq, self.dim)
        return dense(merged, self.wo.tensor, self.bo.tensor)


def multi_head_attention(q_in, kv_in, attn):
    """Functional spelling of :class:`MultiHeadAttention`."""
    return attn(q_in, kv_in)


# -- optimizer -----------------------------------------------------------------


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        if p.tensor.grad is None:
            raise UsageError(f"adam_step: parameter {p.name!r} has no gradient")
        g = p.tensor.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        p.step_count += 1
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    for p in params:
        p.tensor.grad = None
