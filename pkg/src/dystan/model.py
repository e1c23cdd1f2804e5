"""The joint-classification network and its ablation/baseline variants.

FULL wiring: shared conv extractor -> per-task conv branches -> dynamic
cross-stitch (per-instance, per-channel 2x2 row-stochastic mixing from a
pooled-feature controller) -> residual cross-task attention (each task
queries the other's sequence) -> per-task BiLSTM -> temporal mean pooling
-> per-task dense heads.

Variants: NSN (private copies of the shared convs per task), NB (no
BiLSTM; pool the attended features), NA (no attention), CS (static learned
mixing instead of the dynamic controller), CBG (independent single-task
conv/BiLSTM/GRU baselines).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat, dropout, relu, softmax
from .errors import ConfigError, DimensionError, ParseError
from .nn import BatchNorm1d, BiLSTM, Conv1d, Dense, GRU, Module, MultiHeadAttention, Parameter

VARIANTS = ("FULL", "NSN", "NB", "NA", "CS", "CBG")
CHECKPOINT_MAGIC = b"DSTN"
CHECKPOINT_VERSION = 1


@dataclass
class DystanConfig:
    """Complete architecture description; defaults are the reference model."""

    in_channels: int = 13
    seq_len: int = 100
    shared_conv: tuple = ((64, 7), (64, 5))
    branch_conv: tuple = (128, 3)
    dcsu_hidden: int = 64
    attention_heads: int = 4
    lstm_hidden: int = 128
    head_hidden: int = 128
    dropout: float = 0.4
    num_sed: int = 4
    num_soc: int = 3
    variant: str = "FULL"

    def __post_init__(self):
        self.variant = self.variant.upper()
        self.shared_conv = tuple(tuple(layer) for layer in self.shared_conv)
        self.branch_conv = tuple(self.branch_conv)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        channels, kernel = self.branch_conv
        if self.variant in ("FULL", "NSN", "NB", "CS") and channels % self.attention_heads:
            raise ConfigError(
                f"branch channels {channels} not divisible by "
                f"{self.attention_heads} attention heads"
            )
        for c, k in (*self.shared_conv, self.branch_conv):
            if k % 2 == 0 or c < 1:
                raise ConfigError(f"conv layers need odd kernels and >=1 filter: ({c},{k})")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, blob):
        return cls(**json.loads(blob))

    def embedding_dim(self):
        if self.variant == "NB":
            return self.branch_conv[0]
        if self.variant == "CBG":
            return self.lstm_hidden
        return 2 * self.lstm_hidden


@dataclass
class TaskOutputs:
    """Logits and pooled pre-head embeddings for both tasks."""

    sed_logits: Tensor
    soc_logits: Tensor
    sed_embedding: Tensor
    soc_embedding: Tensor
    mixing: np.ndarray | None = None


class _ConvBlock(Module):
    def __init__(self, in_channels, out_channels, kernel, rng):
        self.conv = Conv1d(in_channels, out_channels, kernel, rng)
        self.bn = BatchNorm1d(out_channels)

    def __call__(self, x, train):
        return relu(self.bn(self.conv(x), train))


class _Head(Module):
    def __init__(self, in_dim, hidden, classes, drop, rng):
        self.fc1 = Dense(in_dim, hidden, rng)
        self.fc2 = Dense(hidden, classes, rng)
        self.drop = drop

    def __call__(self, x, train, rng):
        h = dropout(relu(self.fc1(x)), self.drop, train, rng)
        return self.fc2(h)


class DynamicCrossStitch(Module):
    """Per-instance, per-channel 2x2 mixing from a two-layer controller.

    Both task maps are average-pooled over time, concatenated, and mapped
    to 4C logits; a row softmax makes each 2x2 matrix row-stochastic, so
    each output stream is a convex combination of the two input streams.
    """

    def __init__(self, channels, hidden, rng):
        self.fc1 = Dense(2 * channels, hidden, rng)
        self.fc2 = Dense(hidden, 4 * channels, rng)
        self.channels = channels

    def __call__(self, f_sed, f_soc):
        if f_sed.shape != f_soc.shape:
            raise DimensionError(
                f"task streams disagree: {f_sed.shape} vs {f_soc.shape}"
            )
        b = f_sed.shape[0]
        c = self.channels
        pooled = concat([f_sed.mean(axis=2), f_soc.mean(axis=2)], axis=1)
        logits = self.fc2(relu(self.fc1(pooled))).reshape(b, c, 2, 2)
        m = softmax(logits, axis=-1)
        out_sed = m[:, :, 0, 0].reshape(b, c, 1) * f_sed + m[:, :, 0, 1].reshape(
            b, c, 1
        ) * f_soc
        out_soc = m[:, :, 1, 0].reshape(b, c, 1) * f_sed + m[:, :, 1, 1].reshape(
            b, c, 1
        ) * f_soc
        return out_sed, out_soc, m


class StaticCrossStitch(Module):
    """Input-independent learned mixing; rows start near (0.9, 0.1)."""

    def __init__(self, channels, diag_weight=0.9):
        logit = float(np.log(diag_weight / (1.0 - diag_weight)))
        init = np.zeros((channels, 2, 2))
        init[:, 0, 0] = logit
        init[:, 1, 1] = logit
        self.logits = Parameter(init)
        self.channels = channels

    def __call__(self, f_sed, f_soc):
        if f_sed.shape != f_soc.shape:
            raise DimensionError(
                f"task streams disagree: {f_sed.shape} vs {f_soc.shape}"
            )
        b = f_sed.shape[0]
        c = self.channels
        m = softmax(self.logits.tensor, axis=-1)
        out_sed = m[:, 0, 0].reshape(1, c, 1) * f_sed + m[:, 0, 1].reshape(
            1, c, 1
        ) * f_soc
        out_soc = m[:, 1, 0].reshape(1, c, 1) * f_sed + m[:, 1, 1].reshape(
            1, c, 1
        ) * f_soc
        batched = Tensor(np.broadcast_to(m.data, (b, c, 2, 2)).copy())
        return out_sed, out_soc, batched


class DystanModel(Module):
    """All stitched variants (FULL, NSN, NB, NA, CS)."""

    def __init__(self, config, seed=0):
        if config.variant == "CBG":
            raise ConfigError("use CbgModel for the CBG baseline")
        rng = np.random.default_rng(seed)
        self.config = config
        variant = config.variant
        branch_ch, branch_k = config.branch_conv

        def stem():
            blocks = []
            cin = config.in_channels
            for cout, k in config.shared_conv:
                blocks.append(_ConvBlock(cin, cout, k, rng))
                cin = cout
            return blocks, cin

        if variant == "NSN":
            self.sed_stem, stem_out = stem()
            self.soc_stem, _ = stem()
        else:
            self.shared, stem_out = stem()
        self.sed_branch = _ConvBlock(stem_out, branch_ch, branch_k, rng)
        self.soc_branch = _ConvBlock(stem_out, branch_ch, branch_k, rng)
        if variant == "CS":
            self.stitch = StaticCrossStitch(branch_ch)
        else:
            self.stitch = DynamicCrossStitch(branch_ch, config.dcsu_hidden, rng)
        if variant != "NA":
            self.sed_attn = MultiHeadAttention(branch_ch, config.attention_heads, rng)
            self.soc_attn = MultiHeadAttention(branch_ch, config.attention_heads, rng)
        if variant != "NB":
            self.sed_lstm = BiLSTM(branch_ch, config.lstm_hidden, rng)
            self.soc_lstm = BiLSTM(branch_ch, config.lstm_hidden, rng)
        emb = config.embedding_dim()
        self.sed_head = _Head(emb, config.head_hidden, config.num_sed, config.dropout, rng)
        self.soc_head = _Head(emb, config.head_hidden, config.num_soc, config.dropout, rng)
        list(self.named_parameters())  # assign dotted names once

    def forward(self, x, train=False, rng=None):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected (B, {self.config.in_channels}, T) input, got {x.shape}"
            )
        variant = self.config.variant
        if variant == "NSN":
            s_sed, s_soc = x, x
            for block in self.sed_stem:
                s_sed = block(s_sed, train)
            for block in self.soc_stem:
                s_soc = block(s_soc, train)
        else:
            s = x
            for block in self.shared:
                s = block(s, train)
            s_sed = s_soc = s

        f_sed = self.sed_branch(s_sed, train)
        f_soc = self.soc_branch(s_soc, train)
        g_sed, g_soc, mixing = self.stitch(f_sed, f_soc)

        t_sed = g_sed.transpose(0, 2, 1)
        t_soc = g_soc.transpose(0, 2, 1)
        if variant == "NA":
            a_sed, a_soc = t_sed, t_soc
        else:
            a_sed = t_sed + self.sed_attn(t_sed, t_soc)
            a_soc = t_soc + self.soc_attn(t_soc, t_sed)

        if variant == "NB":
            e_sed = a_sed.mean(axis=1)
            e_soc = a_soc.mean(axis=1)
        else:
            e_sed = self.sed_lstm(a_sed).mean(axis=1)
            e_soc = self.soc_lstm(a_soc).mean(axis=1)

        return TaskOutputs(
            sed_logits=self.sed_head(e_sed, train, rng),
            soc_logits=self.soc_head(e_soc, train, rng),
            sed_embedding=e_sed,
            soc_embedding=e_soc,
            mixing=mixing.data.copy(),
        )


class _CbgNet(Module):
    """Single-task conv / BiLSTM / GRU stack with a dense head."""

    def __init__(self, config, classes, rng):
        blocks = []
        cin = config.in_channels
        for cout, k in config.shared_conv:
            blocks.append(_ConvBlock(cin, cout, k, rng))
            cin = cout
        self.blocks = blocks
        self.lstm = BiLSTM(cin, config.lstm_hidden, rng)
        self.gru = GRU(2 * config.lstm_hidden, config.lstm_hidden, rng)
        self.head = Dense(config.lstm_hidden, classes, rng)

    def __call__(self, x, train):
        h = x
        for block in self.blocks:
            h = block(h, train)
        h = self.gru(self.lstm(h.transpose(0, 2, 1)))
        emb = h.mean(axis=1)
        return self.head(emb), emb


class CbgModel(Module):
    """Two independent single-task baselines presented as one joint model.

    The parameter sets are disjoint and the joint loss is additive, so
    training both under one optimizer equals training them independently.
    """

    def __init__(self, config, seed=0):
        if config.variant != "CBG":
            raise ConfigError(f"CbgModel built with variant {config.variant!r}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.sed_net = _CbgNet(config, config.num_sed, rng)
        self.soc_net = _CbgNet(config, config.num_soc, rng)
        list(self.named_parameters())

    def forward(self, x, train=False, rng=None):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected (B, {self.config.in_channels}, T) input, got {x.shape}"
            )
        sed_logits, sed_emb = self.sed_net(x, train)
        soc_logits, soc_emb = self.soc_net(x, train)
        return TaskOutputs(sed_logits, soc_logits, sed_emb, soc_emb, mixing=None)


def build_variant(config, seed=0):
    """Fresh model for the config's variant, parameters drawn from `seed`."""
    if config.variant == "CBG":
        return CbgModel(config, seed)
    return DystanModel(config, seed)


# -- checkpoint format ----------------------------------------------------------


def save_checkpoint(path, config, state):
    """magic 'DSTN', u16 version, u32-length config JSON, u32 entry count,
    then per entry: u16 name length + UTF-8 name, u8 rank, u32 dims,
    little-endian f64 data. Entries are sorted by name.
    """
    blob = config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint: (config, {name: array})."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint (bad magic)")
        version, blob_len = struct.unpack("<HI", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        config = DystanConfig.from_json(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            state[name] = arr.copy()
    return config, state


def load_model(path):
    """Rebuild a model from a checkpoint; bit-exact parameter round-trip."""
    config, state = load_checkpoint(path)
    model = build_variant(config, seed=0)
    model.load_state_arrays(state)
    return model
