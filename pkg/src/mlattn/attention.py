"""Attention mechanisms: softmax, ReLU-linear and cosFormer.

Each mechanism exists in two evaluation orders:

* the quadratic order, which materialises every query/key weight
  (``scaled_dot_attention`` for softmax, ``similarity_attention_oracle``
  for all three), and
* the reordered linear order, ``linear_attention``, which contracts keys
  with values first so cost is linear in sequence length.

Positions are 0-based. cosFormer weights query row ``i`` against key row
``j`` by ``cos(pi/2 * (i/N - j/M))``; for self-attention ``N == M``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .numerics import ConfigError, ShapeError, as_matrix

EPS = 1e-6


class Mechanism(enum.Enum):
    SOFTMAX = "softmax"
    RELU = "relu"
    COSFORMER = "cosformer"

    @classmethod
    def parse(cls, value) -> "Mechanism":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"relu_linear": "relu", "relulinear": "relu", "cos": "cosformer"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown mechanism {value!r}; expected softmax, relu or cosformer") from None

    @property
    def parts(self) -> int:
        """Feature parts per row: cosFormer carries a cos and a sin part."""
        return 2 if self is Mechanism.COSFORMER else 1


@dataclass(frozen=True)
class HeadGeometry:
    num_heads: int
    d_model: int

    def __post_init__(self):
        if self.num_heads < 1 or self.d_model < 1:
            raise ConfigError("num_heads and d_model must be positive")
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"head split: d_model={self.d_model} is not divisible by num_heads={self.num_heads}")

    @property
    def d_kh(self) -> int:
        return self.d_model // self.num_heads

    @property
    def d_vh(self) -> int:
        return self.d_model // self.num_heads


@dataclass(frozen=True)
class ReweightLengths:
    """Query-side length ``n`` and key-side length ``m`` for cosFormer."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"re-weighting lengths must be >= 1, got N={self.n}, M={self.m}")

    @classmethod
    def self_attention(cls, n: int) -> "ReweightLengths":
        return cls(n, n)


@dataclass
class AttentionWeights:
    """Projection matrices; head ``h`` owns columns ``h*d_kh:(h+1)*d_kh``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def geometry(self, num_heads: int) -> HeadGeometry:
        d_model = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d_model, d_model):
                raise ConfigError(f"{name} has shape {w.shape}, expected ({d_model}, {d_model})")
        return HeadGeometry(num_heads, d_model)


def _check_qkv(q, k, v):
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q has {q.shape[1]} columns but k has {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")
    if k.shape[0] == 0:
        raise ShapeError("attention needs at least one key row")
    return q, k, v


def scaled_dot_attention(q, k, v, causal: bool = False) -> np.ndarray:
    q, k, v = _check_qkv(q, k, v)
    out = _backend.kernels.softmax_attention(q[None], k[None], v[None], bool(causal),
                                             1.0 / math.sqrt(q.shape[1]))
    return out[0]


def relu_feature_map(m) -> np.ndarray:
    return np.maximum(as_matrix(m), 0.0)


def cosformer_feature_maps(m, positions, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``ReLU(m)`` into cos- and sin-weighted parts.

    Row ``p`` is scaled by ``cos(pi/2 * positions[p]/length)`` and
    ``sin(...)``. Positions past ``length`` are allowed.
    """
    m = as_matrix(m)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != m.shape[0]:
        raise ShapeError(f"{pos.shape[0]} positions for {m.shape[0]} rows")
    if length < 1:
        raise ConfigError(f"re-weighting length must be >= 1, got {length}")
    angle = (0.5 * np.pi / length) * pos
    r = np.maximum(m, 0.0)
    return r * np.cos(angle)[:, None], r * np.sin(angle)[:, None]


def feature_rows(mech: Mechanism, m: np.ndarray, start: int, length: int) -> np.ndarray:
    """Features for rows at positions ``start, start+1, ...``; cos/sin parts side by side."""
    if mech is Mechanism.RELU:
        return np.maximum(m, 0.0)
    if mech is Mechanism.COSFORMER:
        c, s = cosformer_feature_maps(m, np.arange(start, start + m.shape[0]), length)
        return np.concatenate([c, s], axis=1)
    raise ConfigError("softmax has no linear feature map")


def _stack_parts(features) -> np.ndarray:
    if not isinstance(features, tuple):
        return as_matrix(features)
    parts = [as_matrix(f) for f in features]
    if len(parts) not in (1, 2):
        raise ShapeError("features must have one (ReLU) or two (cos, sin) parts")
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def linear_attention(q_features, k_features, v, causal: bool = False) -> np.ndarray:
    """Reordered linear attention on precomputed features.

    ``q_features``/``k_features`` are a matrix or a ``(cos, sin)`` tuple.
    Numerator ``Qf (Kf^T V)``, denominator ``Qf sum_j Kf_j`` clamped to
    ``EPS``; causal mode keeps running prefix sums.
    """
    qf = _stack_parts(q_features)
    kf = _stack_parts(k_features)
    v = as_matrix(v, "v")
    if qf.shape[1] != kf.shape[1]:
        raise ShapeError(f"query features have {qf.shape[1]} columns, key features {kf.shape[1]}")
    if kf.shape[0] != v.shape[0]:
        raise ShapeError(f"{kf.shape[0]} key rows but {v.shape[0]} value rows")
    return _backend.kernels.linear_attention(qf[None], kf[None], v[None], bool(causal), EPS)[0]


def reweight_matrix(n1: int, n2: int, lengths: ReweightLengths) -> np.ndarray:
    i = np.arange(n1, dtype=np.float64)[:, None] / lengths.n
    j = np.arange(n2, dtype=np.float64)[None, :] / lengths.m
    return np.cos(0.5 * np.pi * (i - j))


def similarity_attention_oracle(q, k, v, mech, lengths: ReweightLengths | None = None,
                                causal: bool = False) -> np.ndarray:
    """Quadratic-order ground truth: row i = sum_j w(i,j) V_j / sum_j w(i,j).

    Softmax uses ``w = exp(q.k / sqrt(d) - rowmax)``; the linear mechanisms
    use ``ReLU(q).ReLU(k)`` times the cosFormer cosine where applicable.
    """
    mech = Mechanism.parse(mech)
    q, k, v = _check_qkv(q, k, v)
    n1, n2 = q.shape[0], k.shape[0]
    mask = np.arange(n2)[None, :] > np.arange(n1)[:, None] if causal else np.zeros((n1, n2), bool)
    if mech is Mechanism.SOFTMAX:
        s = (q @ k.T) / math.sqrt(q.shape[1])
        s = np.where(mask, -np.inf, s)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        return (w @ v) / w.sum(axis=1, keepdims=True)
    w = np.maximum(q, 0.0) @ np.maximum(k, 0.0).T
    if mech is Mechanism.COSFORMER:
        if lengths is None:
            raise ConfigError("cosFormer needs re-weighting lengths")
        w = w * reweight_matrix(n1, n2, lengths)
    w = np.where(mask, 0.0, w)
    den = np.maximum(w.sum(axis=1), EPS)
    return (w @ v) / den[:, None]


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, h, d // h).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * d))


def head_attention(qh, kh, vh, mech: Mechanism, lengths: ReweightLengths | None,
                   causal: bool, oracle: bool = False) -> np.ndarray:
    """Attention over stacked heads ``(H, n, d)`` for one mechanism."""
    if oracle:
        return np.stack([similarity_attention_oracle(a, b, c, mech, lengths, causal)
                         for a, b, c in zip(qh, kh, vh)])
    if mech is Mechanism.SOFTMAX:
        return _backend.kernels.softmax_attention(qh, kh, vh, bool(causal),
                                                  1.0 / math.sqrt(qh.shape[2]))
    if mech is Mechanism.COSFORMER:
        if lengths is None:
            raise ConfigError("cosFormer needs re-weighting lengths")
        qf = np.stack([feature_rows(mech, a, 0, lengths.n) for a in qh])
        kf = np.stack([feature_rows(mech, b, 0, lengths.m) for b in kh])
    else:
        qf, kf = np.maximum(qh, 0.0), np.maximum(kh, 0.0)
    return _backend.kernels.linear_attention(np.ascontiguousarray(qf), np.ascontiguousarray(kf),
                                             vh, bool(causal), EPS)


def multi_head_attention(q, k, v, weights: AttentionWeights, num_heads: int, mech,
                         lengths: ReweightLengths | None = None, causal: bool = False,
                         oracle: bool = False) -> np.ndarray:
    """Project, attend per head with ``mech``, concatenate, project by ``W_O``.

    With ``oracle=True`` every head goes through ``similarity_attention_oracle``.
    """
    mech = Mechanism.parse(mech)
    geo = weights.geometry(num_heads)
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    for name, x in (("q", q), ("k", k), ("v", v)):
        if x.shape[1] != geo.d_model:
            raise ShapeError(f"{name} has {x.shape[1]} columns, expected d_model={geo.d_model}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")
    h = geo.num_heads
    qh = _split_heads(q @ weights.wq, h)
    kh = _split_heads(k @ weights.wk, h)
    vh = _split_heads(v @ weights.wv, h)
    heads = head_attention(qh, kh, vh, mech, lengths, causal, oracle)
    return _merge_heads(heads) @ weights.wo
