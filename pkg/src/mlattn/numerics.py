"""Dense float64 helpers and the seeded random source shared by every module.

Matrices are plain C-contiguous ``numpy.float64`` arrays of shape
``(rows, cols)``. The random source is PCG64 seeded through a
``SeedSequence``; uniform doubles are built from the raw 64-bit output
(top 53 bits) so streams do not depend on numpy's distribution code.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


class Rng:
    """Seedable, platform-independent uniform random source.

    Algorithm: PCG64 (XSL-RR 128/64) initialised from
    ``SeedSequence(seed)``; a double is ``(raw >> 11) * 2**-53``.
    """

    def __init__(self, seed: int, *, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed & (2**64 - 1))
        self._bits = np.random.PCG64(self._seq)

    def child(self, tag: int) -> "Rng":
        """Independent stream derived from ``(seed, tag)``; does not advance ``self``."""
        entropy = [self.seed & (2**64 - 1), int(tag)]
        return Rng(self.seed, _seq=np.random.SeedSequence(entropy))

    def random(self, size: int) -> np.ndarray:
        raw = self._bits.random_raw(size)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        return (low + (high - low) * self.random(n)).reshape(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return (low + np.floor(self.random(size) * (high - low))).astype(np.int64)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (mean + std * z).reshape(shape)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return np.ascontiguousarray(a @ b)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def random_matrix(rows: int, cols: int, rng: Rng, scale: float = 1.0) -> np.ndarray:
    """Uniform draws from ``[-scale, scale]``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"random_matrix needs positive dimensions, got {rows}x{cols}")
    return rng.uniform((rows, cols), -scale, scale)


def max_rel_error(actual, expected) -> float:
    """``max|actual - expected| / max|expected|`` (absolute error when expected is all zero)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"shape mismatch {actual.shape} vs {expected.shape}")
    diff = float(np.max(np.abs(actual - expected))) if actual.size else 0.0
    ref = float(np.max(np.abs(expected))) if expected.size else 0.0
    return diff / ref if ref > 0 else diff
