"""Target-length predictors that feed the cosFormer re-weighting lengths.

Predictions are rounded half-up and clamped to at least 1.

File formats (UTF-8, tab separated):

* ratio predictor: ``#ratio<TAB>alpha``
* LUT predictor: ``#fallback<TAB>value``, optional ``#dampening<TAB>value``,
  then one ``token<TAB>average_length`` record per line
* ratio corpus: ``src_len<TAB>tgt_len`` per line
* LUT corpus: ``token<TAB>length`` per line
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InputError(ValueError):
    """Malformed or empty predictor input."""


def _round_len(x: float) -> int:
    return max(1, int(math.floor(x + 0.5)))


@dataclass(frozen=True)
class RatioPredictor:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError(f"alpha must be positive, got {self.alpha}")

    def predict(self, src_len: int) -> int:
        return predict_ratio(src_len, self)


@dataclass(frozen=True)
class LutPredictor:
    table: dict[str, float]
    fallback: float
    dampening: float = 1.0

    def __post_init__(self):
        bad = [t for t, x in self.table.items() if not x > 0]
        if bad:
            raise InputError(f"non-positive LUT entries for {bad[:5]}")
        if not self.fallback > 0:
            raise InputError(f"fallback must be positive, got {self.fallback}")
        if not self.dampening > 0:
            raise InputError(f"dampening must be positive, got {self.dampening}")

    def predict(self, tokens) -> int:
        return predict_lut(tokens, self)

    def with_dampening(self, dampening: float) -> "LutPredictor":
        return LutPredictor(dict(self.table), self.fallback, dampening)


@dataclass(frozen=True)
class FixedLength:
    """Externally supplied length, e.g. from a learned predictor."""

    length: int

    def __post_init__(self):
        if self.length < 1:
            raise InputError(f"fixed length must be >= 1, got {self.length}")

    def predict(self, _src=None) -> int:
        return self.length


@dataclass(frozen=True)
class CorpusPair:
    src_len: int
    tgt_len: int

    def __post_init__(self):
        if self.src_len < 1 or self.tgt_len < 1:
            raise InputError(f"corpus lengths must be >= 1, got ({self.src_len}, {self.tgt_len})")


def predict_ratio(src_len: int, p: RatioPredictor) -> int:
    if src_len < 1:
        raise InputError(f"source length must be >= 1, got {src_len}")
    return _round_len(p.alpha * src_len)


def fit_ratio(corpus, mode: str = "average", q: float = 0.9) -> RatioPredictor:
    """Fit ``alpha`` as the mean (``average``) or ``q``-quantile (``quantile``) of tgt/src."""
    pairs = [p if isinstance(p, CorpusPair) else CorpusPair(*p) for p in corpus]
    if not pairs:
        raise InputError("cannot fit a ratio on an empty corpus")
    ratios = np.array([p.tgt_len / p.src_len for p in pairs])
    if mode == "average":
        # shifted mean: exact when every pair has the same ratio
        return RatioPredictor(float(ratios[0] + (ratios - ratios[0]).mean()))
    if mode == "quantile":
        if not 0.0 <= q <= 1.0:
            raise InputError(f"quantile must be in [0, 1], got {q}")
        return RatioPredictor(float(np.quantile(ratios, q)))
    raise InputError(f"unknown fit mode {mode!r}")


def predict_lut(tokens, p: LutPredictor) -> int:
    tokens = list(tokens)
    if not tokens:
        raise InputError("LUT prediction needs at least one token")
    total = sum(p.table.get(t, p.fallback) for t in tokens)
    return _round_len(p.dampening * total)


def fit_lut(alignments) -> LutPredictor:
    """Per-token mean observed length; fallback is the global mean."""
    sums: dict[str, float] = defaultdict(float)
    counts: dict[str, int] = defaultdict(int)
    n = 0
    total = 0.0
    for token, length in alignments:
        sums[token] += length
        counts[token] += 1
        total += length
        n += 1
    if n == 0:
        raise InputError("cannot fit a LUT on empty alignments")
    table = {t: sums[t] / counts[t] for t in sums}
    return LutPredictor(table, total / n, 1.0)


def _records(path):
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        yield lineno, line.rstrip("\n").split("\t")


def _positive(value: str, where: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise InputError(f"{where}: not a number: {value!r}") from None
    if not x > 0 or not math.isfinite(x):
        raise InputError(f"{where}: value must be positive, got {value}")
    return x


def read_ratio_corpus(path) -> list[CorpusPair]:
    pairs = []
    for lineno, rec in _records(path):
        if rec[0].startswith("#"):
            continue
        if len(rec) != 2:
            raise InputError(f"{path}:{lineno}: expected src_len<TAB>tgt_len")
        try:
            pairs.append(CorpusPair(int(rec[0]), int(rec[1])))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    return pairs


def read_lut_corpus(path) -> list[tuple[str, float]]:
    out = []
    for lineno, rec in _records(path):
        if len(rec) != 2:
            raise InputError(f"{path}:{lineno}: expected token<TAB>length")
        out.append((rec[0], _positive(rec[1], f"{path}:{lineno}")))
    return out


def save_predictor(p, path) -> None:
    if isinstance(p, RatioPredictor):
        text = f"#ratio\t{p.alpha!r}\n"
    elif isinstance(p, LutPredictor):
        lines = [f"#fallback\t{p.fallback!r}"]
        if p.dampening != 1.0:
            lines.append(f"#dampening\t{p.dampening!r}")
        lines += [f"{t}\t{x!r}" for t, x in sorted(p.table.items())]
        text = "\n".join(lines) + "\n"
    else:
        raise TypeError(f"cannot serialise {type(p).__name__}")
    Path(path).write_text(text, encoding="utf-8")


def load_predictor(path) -> RatioPredictor | LutPredictor:
    """Load a ratio or LUT predictor file; non-positive values are rejected."""
    header: dict[str, float] = {}
    table: dict[str, float] = {}
    for lineno, rec in _records(path):
        where = f"{path}:{lineno}"
        if len(rec) != 2:
            raise InputError(f"{where}: expected two tab-separated fields")
        key, value = rec
        if key.startswith("#"):
            header[key[1:]] = _positive(value, where)
        else:
            table[key] = _positive(value, where)
    if "ratio" in header:
        return RatioPredictor(header["ratio"])
    if "fallback" not in header:
        raise InputError(f"{path}: missing #fallback (LUT) or #ratio header")
    return LutPredictor(table, header["fallback"], header.get("dampening", 1.0))
