"""Incremental attention for autoregressive decoding.

Linear mechanisms keep a running ``K^T V`` accumulator and a running key
sum per stream, so one decoding step costs ``O(d_kh * d_vh)`` whatever the
history length. Re-weighting lengths are frozen at the first step; a key
row's contribution never changes once consumed.

All state objects carry a leading stream axis ``B`` (heads, samples, or
both). Single-stream callers may pass 2-D rows and get a ``(1, d_vh)`` row
back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .attention import EPS, Mechanism, ReweightLengths
from .numerics import ConfigError, ShapeError


def batched_features(mech: Mechanism, x: np.ndarray, start: int, length: int | None) -> np.ndarray:
    """Features of ``x`` (B, k, d) at positions ``start..start+k-1``.

    cosFormer returns the cos and sin parts side by side: ``(B, k, 2d)``.
    """
    r = np.maximum(x, 0.0)
    if mech is Mechanism.RELU:
        return r
    if mech is not Mechanism.COSFORMER:
        raise ConfigError(f"{mech.value} has no linear feature map")
    pos = np.arange(start, start + x.shape[1], dtype=np.float64)
    angle = (0.5 * np.pi / length) * pos
    return np.concatenate([r * np.cos(angle)[:, None], r * np.sin(angle)[:, None]], axis=2)


@dataclass
class DecoderBlockState:
    """Running accumulators for one attention block.

    ``m_acc`` has shape ``(B, parts, d_kh, d_vh)`` and ``s_acc`` shape
    ``(B, parts, d_kh)``; part 0 is the cos part and part 1 the sin part
    for cosFormer, ReLU has a single part.
    """

    mech: Mechanism
    d_kh: int
    d_vh: int
    m_acc: np.ndarray
    s_acc: np.ndarray
    k_transformed: np.ndarray | None = None
    steps_seen: int = 0
    lengths: ReweightLengths | None = None
    updates: int = 0
    last_step_ops: int = 0

    @property
    def batch(self) -> int:
        return self.m_acc.shape[0]

    @property
    def parts(self) -> int:
        return self.m_acc.shape[1]

    def _flat(self):
        b, p = self.batch, self.parts
        return self.m_acc.reshape(b, p * self.d_kh, self.d_vh), self.s_acc.reshape(b, p * self.d_kh)

    def copy(self) -> "DecoderBlockState":
        return DecoderBlockState(
            self.mech, self.d_kh, self.d_vh, self.m_acc.copy(), self.s_acc.copy(),
            None if self.k_transformed is None else self.k_transformed.copy(),
            self.steps_seen, self.lengths, self.updates, self.last_step_ops)


@dataclass
class StepInput:
    """One decoding step.

    ``q_position`` defaults to the newest consumed key (self-attention);
    ``k_start`` defaults to ``state.steps_seen``.
    """

    q_row: np.ndarray
    new_k_rows: np.ndarray | None = None
    new_v_rows: np.ndarray | None = None
    update: bool = True
    lengths: ReweightLengths | None = None
    q_position: int | None = None
    k_start: int | None = None


def init_state(mech, d_kh: int, d_vh: int, keep_k: bool = False, batch: int = 1) -> DecoderBlockState:
    mech = Mechanism.parse(mech)
    if mech is Mechanism.SOFTMAX:
        raise ConfigError("softmax attention has no linear state; use SoftmaxCache")
    if d_kh < 1 or d_vh < 1 or batch < 1:
        raise ShapeError(f"state dimensions must be >= 1, got d_kh={d_kh}, d_vh={d_vh}, batch={batch}")
    p = mech.parts
    return DecoderBlockState(
        mech, d_kh, d_vh,
        m_acc=np.zeros((batch, p, d_kh, d_vh)),
        s_acc=np.zeros((batch, p, d_kh)),
        k_transformed=np.zeros((batch, 0, p * d_kh)) if keep_k else None,
    )


def _as_batched(x, ndim: int, name: str) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        x = x[None]
    if x.ndim != ndim:
        raise ShapeError(f"{name} has {x.ndim} dimensions")
    return x


def _freeze_lengths(state: DecoderBlockState, lengths: ReweightLengths | None) -> ReweightLengths | None:
    if state.mech is not Mechanism.COSFORMER:
        return None
    if lengths is None:
        lengths = state.lengths
    if lengths is None:
        raise ConfigError("cosFormer decoding needs re-weighting lengths")
    if state.lengths is None:
        state.lengths = lengths
    elif lengths != state.lengths:
        raise ConfigError(f"re-weighting lengths are frozen at {state.lengths}, got {lengths}")
    return lengths


def decode_step(state: DecoderBlockState, step: StepInput) -> tuple[np.ndarray, DecoderBlockState]:
    """Advance ``state`` by one step and attend the query row.

    The state is updated in place and returned. With ``step.update`` false
    the accumulators are left untouched.
    """
    q = step.q_row
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    if q.ndim == 3:
        q = q.reshape(q.shape[0], q.shape[2])
    if q.shape != (state.batch, state.d_kh):
        raise ShapeError(f"query has shape {q.shape}, state expects ({state.batch}, {state.d_kh})")
    lengths = _freeze_lengths(state, step.lengths)
    m2, s2 = state._flat()
    ops = 0
    if step.update:
        if step.new_k_rows is None or step.new_v_rows is None:
            raise ShapeError("an update step needs new key and value rows")
        k = _as_batched(step.new_k_rows, 3, "new_k_rows")
        v = _as_batched(step.new_v_rows, 3, "new_v_rows")
        if k.shape[0] != state.batch or v.shape[0] != state.batch:
            raise ShapeError("new rows do not match the state's stream count")
        if k.shape[1] != v.shape[1]:
            raise ShapeError(f"{k.shape[1]} new key rows but {v.shape[1]} value rows")
        if k.shape[2] != state.d_kh or v.shape[2] != state.d_vh:
            raise ShapeError(f"new rows have widths ({k.shape[2]}, {v.shape[2]}), "
                             f"state expects ({state.d_kh}, {state.d_vh})")
        start = state.steps_seen if step.k_start is None else step.k_start
        kf = np.ascontiguousarray(batched_features(state.mech, k, start, lengths and lengths.m))
        _backend.kernels.linear_update(m2, s2, kf, v)
        if state.k_transformed is not None:
            state.k_transformed = np.concatenate([state.k_transformed, kf], axis=1)
        state.steps_seen += k.shape[1]
        state.updates += 1
        ops += kf.size * (2 * state.d_vh + 1) + k.size * (4 if state.mech is Mechanism.COSFORMER else 1)
    qpos = state.steps_seen - 1 if step.q_position is None else step.q_position
    qf = batched_features(state.mech, q[:, None, :], max(qpos, 0), lengths and lengths.n)[:, 0]
    row = _backend.kernels.linear_query(np.ascontiguousarray(qf), m2, s2, EPS)
    ops += qf.size * (2 * state.d_vh + 2) + state.batch * (state.d_vh + 1)
    state.last_step_ops = ops
    return row, state


class SoftmaxCache:
    """Key/value cache for softmax decoding; each step re-scores the whole history."""

    def __init__(self, batch: int, d_kh: int, d_vh: int, capacity: int = 64):
        self.k = np.zeros((batch, capacity, d_kh))
        self.v = np.zeros((batch, capacity, d_vh))
        self.length = 0
        self.scale = 1.0 / math.sqrt(d_kh)

    def append(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        n = k_rows.shape[1]
        if self.length + n > self.k.shape[1]:
            cap = max(2 * self.k.shape[1], self.length + n)
            for name in ("k", "v"):
                old = getattr(self, name)
                new = np.zeros((old.shape[0], cap, old.shape[2]))
                new[:, : self.length] = old[:, : self.length]
                setattr(self, name, new)
        self.k[:, self.length: self.length + n] = k_rows
        self.v[:, self.length: self.length + n] = v_rows
        self.length += n

    def query(self, q: np.ndarray) -> np.ndarray:
        return _backend.kernels.softmax_step(np.ascontiguousarray(q), self.k, self.v,
                                             self.length, self.scale)


class NaiveLinearDecoder:
    """Linear attention that re-forms ``K^T V`` from all retained keys every step."""

    def __init__(self, mech, batch: int, d_kh: int, d_vh: int, lengths: ReweightLengths | None = None,
                 capacity: int = 64):
        self.mech = Mechanism.parse(mech)
        if self.mech is Mechanism.COSFORMER and lengths is None:
            raise ConfigError("cosFormer decoding needs re-weighting lengths")
        self.lengths = lengths
        width = self.mech.parts * d_kh
        self.kf = np.zeros((batch, capacity, width))
        self.v = np.zeros((batch, capacity, d_vh))
        self.length = 0

    def append(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        kf = batched_features(self.mech, k_rows, self.length, self.lengths and self.lengths.m)
        n = kf.shape[1]
        if self.length + n > self.kf.shape[1]:
            cap = max(2 * self.kf.shape[1], self.length + n)
            for name in ("kf", "v"):
                old = getattr(self, name)
                new = np.zeros((old.shape[0], cap, old.shape[2]))
                new[:, : self.length] = old[:, : self.length]
                setattr(self, name, new)
        self.kf[:, self.length: self.length + n] = kf
        self.v[:, self.length: self.length + n] = v_rows
        self.length += n

    def query(self, q: np.ndarray, position: int) -> np.ndarray:
        qf = batched_features(self.mech, q[:, None, :], position, self.lengths and self.lengths.n)[:, 0]
        return _backend.kernels.linear_naive_step(np.ascontiguousarray(qf), self.kf, self.v,
                                                  self.length, EPS)


def run_incremental_self_attention(q_rows, k_rows, v_rows, mech,
                                   lengths: ReweightLengths | None = None) -> np.ndarray:
    """Decode a self-attention stream one row at a time; row t sees rows 0..t."""
    mech = Mechanism.parse(mech)
    q, k, v = (np.ascontiguousarray(x, dtype=np.float64) for x in (q_rows, k_rows, v_rows))
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ShapeError("self-attention stream needs equal row counts for q, k and v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q has {q.shape[1]} columns but k has {k.shape[1]}")
    out = np.empty((q.shape[0], v.shape[1]))
    if mech is Mechanism.SOFTMAX:
        cache = SoftmaxCache(1, q.shape[1], v.shape[1], capacity=max(q.shape[0], 1))
        for t in range(q.shape[0]):
            cache.append(k[None, t: t + 1], v[None, t: t + 1])
            out[t] = cache.query(q[None, t])[0]
        return out
    state = init_state(mech, q.shape[1], v.shape[1])
    for t in range(q.shape[0]):
        row, state = decode_step(state, StepInput(q[t: t + 1], k[t: t + 1], v[t: t + 1],
                                                  update=True, lengths=lengths))
        out[t] = row[0]
    return out


def run_incremental_cross_attention(q_rows, enc_k, enc_v, mech,
                                    lengths: ReweightLengths | None = None,
                                    return_state: bool = False):
    """Cross-attention decoding: encoder rows are folded in once, then reused."""
    mech = Mechanism.parse(mech)
    q, k, v = (np.ascontiguousarray(x, dtype=np.float64) for x in (q_rows, enc_k, enc_v))
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"encoder keys have {k.shape[0]} rows but values {v.shape[0]}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q has {q.shape[1]} columns but k has {k.shape[1]}")
    out = np.empty((q.shape[0], v.shape[1]))
    if mech is Mechanism.SOFTMAX:
        cache = SoftmaxCache(1, k.shape[1], v.shape[1], capacity=k.shape[0])
        cache.append(k[None], v[None])
        for t in range(q.shape[0]):
            out[t] = cache.query(q[None, t])[0]
        return (out, cache) if return_state else out
    state = init_state(mech, k.shape[1], v.shape[1])
    for t in range(q.shape[0]):
        first = t == 0
        step = StepInput(q[t: t + 1], k if first else None, v if first else None,
                         update=first, lengths=lengths, q_position=t, k_start=0)
        row, state = decode_step(state, step)
        out[t] = row[0]
    return (out, state) if return_state else out
