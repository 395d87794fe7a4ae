"""CAFNet (ternary classifier + splice localiser) and the MFAAN binary baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import ops
from .autograd.tensor import Tensor, as_tensor, parameter
from .features import FeatureSet
from .nn import BatchNorm, BiLSTM, Conv1d, Conv2d, Linear, Module, MultiheadAttention, count_params

__all__ = [
    "CAFNet",
    "CAFNetConfig",
    "EnhancedPath",
    "CrossAttentionFusion",
    "MFAAN",
    "MFAANConfig",
    "ModelOutput",
    "count_params",
    "trust_gate",
    "build_model",
]


@dataclass(frozen=True)
class CAFNetConfig:
    in_channels: tuple[int, int, int] = (40, 40, 12)
    channels: tuple[int, int] = (64, 128)
    kernel: int = 5
    attn_dim: int = 16
    fusion_heads: int = 8
    main_hidden: int = 256
    lstm_layers: int = 2
    lstm_hidden: int = 64
    lstm_chrono_horizon: int | None = 251
    path_attention: bool = True
    path_dropout: float = 0.2
    head_dropout: float = 0.3

    def __post_init__(self):
        if min(self.in_channels + self.channels) <= 0 or self.kernel <= 0 or self.lstm_hidden <= 0:
            raise ValueError("all dimensions must be positive")
        if self.channels[-1] % self.fusion_heads:
            raise ValueError("d_model must be divisible by the number of fusion heads")


@dataclass(frozen=True)
class MFAANConfig:
    in_channels: int = 3
    channels: tuple[int, int] = (64, 128)
    kernel: int = 3
    hidden: int = 256
    n_classes: int = 2
    dropout: float = 0.3


@dataclass
class ModelOutput:
    main_logits: Tensor  # [B, 3]
    aux_logits: Tensor  # [B, 3]
    boundaries: Tensor  # [B, 2], sigmoid outputs


def _time_major(x: Tensor) -> Tensor:
    return ops.swapaxes(x, -1, -2)


class EnhancedPath(Module):
    """Two depthwise-separable conv blocks, gated self-attention, then MaxPool1d(2)."""

    def __init__(self, in_ch: int, cfg: CAFNetConfig, rng: np.random.Generator):
        c1, c2 = cfg.channels
        pad = cfg.kernel // 2
        self.dw1 = Conv1d(in_ch, in_ch, cfg.kernel, rng, groups=in_ch, padding=pad)
        self.pw1 = Conv1d(in_ch, c1, 1, rng)
        self.bn1 = BatchNorm(c1)
        self.dw2 = Conv1d(c1, c1, cfg.kernel, rng, groups=c1, padding=pad)
        self.pw2 = Conv1d(c1, c2, 1, rng)
        self.bn2 = BatchNorm(c2)
        self.attention = cfg.path_attention
        if self.attention:
            self.query = Linear(c2, cfg.attn_dim, rng)
            self.key = Linear(c2, cfg.attn_dim, rng)
            self.value = Linear(c2, c2, rng)
            # residual gate starts closed
            self.gamma = parameter(np.zeros(1, np.float32))
        self.dropout = cfg.path_dropout

    def ds_blocks(self, x: Tensor) -> Tensor:
        h = ag.relu(self.bn1(self.pw1(self.dw1(x))))
        h = ag.dropout(h, self.dropout, self.rng, self.training)
        h = ag.relu(self.bn2(self.pw2(self.dw2(h))))
        return ag.dropout(h, self.dropout, self.rng, self.training)

    def __call__(self, x: Tensor):
        """``x`` ``[B, C_in, T]`` -> (pre_pool ``[B, 128, T]``, pooled ``[B, 128, T//2]``)."""
        h = self.ds_blocks(x)
        if not self.attention:
            return h, ag.max_pool1d(h, 2)
        s = _time_major(h)
        attn = ag.scaled_dot_attention(self.query(s), self.key(s), self.value(s))
        pre_pool = _time_major(ops.add(s, ops.mul(attn, self.gamma)))
        return pre_pool, ag.max_pool1d(pre_pool, 2)


class CrossAttentionFusion(Module):
    """MFCC queries attend over the time-concatenated LFCC and chroma sequences."""

    def __init__(self, cfg: CAFNetConfig, rng: np.random.Generator):
        d = cfg.channels[-1]
        self.attn = MultiheadAttention(d, cfg.fusion_heads, rng)
        self.gate = Linear(3 * d, 3, rng)
        self.out_proj = Linear(2 * d, d, rng)

    def gate_weights(self, means) -> Tensor:
        return ag.softmax(self.gate(ag.concat(means, axis=-1)), axis=-1)

    def __call__(self, m_pool: Tensor, l_pool: Tensor, c_pool: Tensor) -> Tensor:
        kv = ag.concat([_time_major(l_pool), _time_major(c_pool)], axis=-2)
        attended = self.attn(_time_major(m_pool), kv, kv)
        f = ops.mean(attended, axis=-2)
        means = [ops.mean(p, axis=-1) for p in (m_pool, l_pool, c_pool)]
        g = self.gate_weights(means)
        gated = None
        for i, m in enumerate(means):
            term = ops.mul(m, ops.index(g, (..., slice(i, i + 1))))
            gated = term if gated is None else ops.add(gated, term)
        return self.out_proj(ag.concat([f, gated], axis=-1))


class MainHead(Module):
    def __init__(self, d: int, hidden: int, n_out: int, dropout: float, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)
        self.dropout = dropout

    def __call__(self, x):
        h = ag.dropout(ag.relu(self.fc1(x)), self.dropout, self.rng, self.training)
        return self.fc2(h)


class TemporalHead(Module):
    def __init__(self, n_in: int, hidden: int, layers: int, rng, chrono_horizon=None):
        self.lstm = BiLSTM(n_in, hidden, layers, rng, chrono_horizon)
        self.proj = Linear(2 * hidden, 2, rng)

    def __call__(self, seq: Tensor) -> Tensor:
        h = self.lstm(seq)
        return ag.sigmoid(self.proj(ops.mean(h, axis=-2)))


class CAFNet(Module):
    HEAD_MODULES = ("main_head", "aux_head", "temporal_head", "fusion.out_proj")

    def __init__(self, cfg: CAFNetConfig | None = None, seed: int = 42):
        cfg = cfg or CAFNetConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        d = cfg.channels[-1]
        self.mfcc_path = EnhancedPath(cfg.in_channels[0], cfg, rng)
        self.lfcc_path = EnhancedPath(cfg.in_channels[1], cfg, rng)
        self.chroma_path = EnhancedPath(cfg.in_channels[2], cfg, rng)
        self.fusion = CrossAttentionFusion(cfg, rng)
        self.main_head = MainHead(d, cfg.main_hidden, 3, cfg.head_dropout, rng)
        self.aux_head = Linear(d, 3, rng)
        self.temporal_head = TemporalHead(3 * d, cfg.lstm_hidden, cfg.lstm_layers, rng, cfg.lstm_chrono_horizon)
        self.set_rng(np.random.default_rng(seed + 1))

    def paths(self, mfcc, lfcc, chroma):
        return self.mfcc_path(mfcc), self.lfcc_path(lfcc), self.chroma_path(chroma)

    def __call__(self, mfcc, lfcc, chroma) -> ModelOutput:
        """Batched forward on ``[B, 40, 251]``, ``[B, 40, 251]``, ``[B, 12, 251]`` inputs."""
        (m_pre, m_pool), (l_pre, l_pool), (c_pre, c_pool) = self.paths(
            as_tensor(mfcc), as_tensor(lfcc), as_tensor(chroma)
        )
        fused = self.fusion(m_pool, l_pool, c_pool)
        seq = _time_major(ag.concat([m_pre, l_pre, c_pre], axis=-2))
        return ModelOutput(self.main_head(fused), self.aux_head(fused), self.temporal_head(seq))

    def forward_features(self, features: FeatureSet) -> ModelOutput:
        return self(*(m[None] for m in features.as_tuple()))


class MFAANPath(Module):
    def __init__(self, cfg: MFAANConfig, rng):
        c1, c2 = cfg.channels
        self.conv1 = Conv2d(1, c1, cfg.kernel, rng, padding=cfg.kernel // 2)
        self.conv2 = Conv2d(c1, c2, cfg.kernel, rng, padding=cfg.kernel // 2)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.max_pool2d(ag.dropout(ag.relu(self.conv1(x)), self.dropout, self.rng, self.training), 2)
        h = ag.max_pool2d(ag.dropout(ag.relu(self.conv2(h)), self.dropout, self.rng, self.training), 2)
        return ag.adaptive_avg_pool_to_1(h, 2)


class MFAAN(Module):
    """Three 2-D CNN paths, concatenated, then a two-layer dense binary head."""

    def __init__(self, cfg: MFAANConfig | None = None, seed: int = 42):
        cfg = cfg or MFAANConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.mfcc_path = MFAANPath(cfg, rng)
        self.lfcc_path = MFAANPath(cfg, rng)
        self.chroma_path = MFAANPath(cfg, rng)
        self.fc1 = Linear(cfg.in_channels * cfg.channels[-1], cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, cfg.n_classes, rng)
        self.set_rng(np.random.default_rng(seed + 1))

    def __call__(self, mfcc, lfcc, chroma) -> Tensor:
        feats = []
        for path, x in ((self.mfcc_path, mfcc), (self.lfcc_path, lfcc), (self.chroma_path, chroma)):
            x = as_tensor(x)
            feats.append(path(ops.reshape(x, (x.shape[0], 1) + x.shape[1:])))
        h = ag.dropout(ag.relu(self.fc1(ag.concat(feats, axis=-1))), self.config.dropout, self.rng, self.training)
        return self.fc2(h)

    def forward_features(self, features: FeatureSet) -> Tensor:
        return self(*(m[None] for m in features.as_tuple()))


def build_model(name: str, seed: int = 42) -> Module:
    if name == "cafnet":
        return CAFNet(seed=seed)
    if name == "mfaan":
        return MFAAN(seed=seed)
    raise ValueError(f"unknown model {name!r} (expected cafnet or mfaan)")


def model_config_dict(model: Module) -> dict:
    return {"model": type(model).__name__.lower(), **asdict(model.config)}


def probabilities(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def trust_gate(probs) -> bool:
    """Boundaries are trusted iff the half-truth probability is at least 0.5."""
    return bool(np.asarray(probs)[..., 2] >= 0.5)
