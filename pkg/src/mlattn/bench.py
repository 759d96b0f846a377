"""Latency sweeps over synthetic decoding workloads and their reports.

A sweep times single-head decoder attention (self or cross) for each
mechanism and sequence length. Linear mechanisms come in two variants:
``reuse`` carries the ``K^T V`` accumulator across steps, ``naive`` rebuilds
it from all retained keys at every step. Softmax always re-scores its
key/value cache.
"""
from __future__ import annotations

import csv
import gc
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import Mechanism, ReweightLengths
from .decoder import NaiveLinearDecoder, SoftmaxCache, StepInput, decode_step, init_state
from .flops import decode_attention_flops
from .numerics import ConfigError, Rng

log = logging.getLogger(__name__)

FIELDS = ("config", "n1", "n2", "mean_s", "std_s", "throughput_itr_s", "flops")
UNRELIABLE = "[unreliable]"


@dataclass
class SweepSpec:
    mechanisms: tuple[Mechanism, ...] = (Mechanism.SOFTMAX, Mechanism.RELU, Mechanism.COSFORMER)
    lengths: tuple[int, ...] = (64, 128, 256)
    d_kh: int = 32
    d_vh: int = 32
    batch: int = 1
    samples: int = 4
    repetitions: int = 3
    variants: tuple[str, ...] = ("reuse", "naive")
    role: str = "self"
    target_len: int = 150

    def __post_init__(self):
        self.mechanisms = tuple(Mechanism.parse(m) for m in self.mechanisms)
        self.lengths = tuple(int(n) for n in self.lengths)
        self.variants = tuple(self.variants)
        if not self.lengths or any(n < 1 for n in self.lengths):
            raise ConfigError("sweep lengths must be a nonempty list of positive integers")
        if list(self.lengths) != sorted(self.lengths):
            raise ConfigError(f"sweep lengths must be ascending, got {list(self.lengths)}")
        if self.repetitions < 3:
            raise ConfigError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.role not in ("self", "cross"):
            raise ConfigError(f"role must be 'self' or 'cross', got {self.role!r}")
        bad = set(self.variants) - {"reuse", "naive"}
        if bad or not self.variants:
            raise ConfigError(f"variants must be drawn from reuse/naive, got {list(self.variants)}")
        for name in ("d_kh", "d_vh", "batch", "samples", "target_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sweep spec keys: {sorted(unknown)}")
        return cls(**data)


def load_sweep_spec(path) -> SweepSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return SweepSpec.from_dict(data)


@dataclass
class BenchRow:
    config: str
    n1: int
    n2: int
    mean_s: float
    std_s: float
    throughput_itr_s: float
    flops: int
    calls: int = 0
    reliable: bool = True

    def record(self) -> dict:
        rec = {k: getattr(self, k) for k in FIELDS}
        if not self.reliable and not self.config.endswith(UNRELIABLE):
            rec["config"] = self.config + UNRELIABLE
        return rec


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def find(self, config: str, n2: int) -> BenchRow:
        for r in self.rows:
            if r.config.removesuffix(UNRELIABLE) == config and r.n2 == n2:
                return r
        raise KeyError((config, n2))


def config_id(role: str, mech: Mechanism, variant: str, batch: int) -> str:
    if mech is Mechanism.SOFTMAX:
        return f"{role}/softmax/b{batch}"
    return f"{role}/{mech.value}/{variant}/b{batch}"


def synthetic_workload(rng: Rng, spec: SweepSpec, point: int, n: int):
    """Q/K/V for one sweep point; identical for every mechanism and run."""
    r = rng.child(point)
    n_q = n if spec.role == "self" else spec.target_len
    q = r.uniform((spec.samples, n_q, spec.d_kh), -1.0, 1.0)
    k = r.uniform((spec.samples, n, spec.d_kh), -1.0, 1.0)
    v = r.uniform((spec.samples, n, spec.d_vh), -1.0, 1.0)
    return q, k, v


def decode_batch(mech: Mechanism, variant: str, role: str, q, k, v) -> np.ndarray:
    """Run one decode over a batch; returns the ``(B, steps, d_vh)`` outputs."""
    b, steps, dk = q.shape
    n2, dv = k.shape[1], v.shape[2]
    out = np.empty((b, steps, dv))
    if role == "self":
        lengths = ReweightLengths(steps, steps)
        if mech is Mechanism.SOFTMAX:
            cache = SoftmaxCache(b, dk, dv, capacity=steps)
            for t in range(steps):
                cache.append(k[:, t: t + 1], v[:, t: t + 1])
                out[:, t] = cache.query(q[:, t])
        elif variant == "reuse":
            state = init_state(mech, dk, dv, batch=b)
            for t in range(steps):
                out[:, t], state = decode_step(
                    state, StepInput(q[:, t], k[:, t: t + 1], v[:, t: t + 1], lengths=lengths))
        else:
            dec = NaiveLinearDecoder(mech, b, dk, dv, lengths, capacity=steps)
            for t in range(steps):
                dec.append(k[:, t: t + 1], v[:, t: t + 1])
                out[:, t] = dec.query(q[:, t], t)
        return out
    lengths = ReweightLengths(steps, n2)
    if mech is Mechanism.SOFTMAX:
        cache = SoftmaxCache(b, dk, dv, capacity=n2)
        cache.append(k, v)
        for t in range(steps):
            out[:, t] = cache.query(q[:, t])
    elif variant == "reuse":
        state = init_state(mech, dk, dv, batch=b)
        for t in range(steps):
            first = t == 0
            out[:, t], state = decode_step(state, StepInput(
                q[:, t], k if first else None, v if first else None, update=first,
                lengths=lengths, q_position=t, k_start=0))
    else:
        dec = NaiveLinearDecoder(mech, b, dk, dv, lengths, capacity=n2)
        dec.append(k, v)
        for t in range(steps):
            out[:, t] = dec.query(q[:, t], t)
    return out


def _timer_floor() -> float:
    return 100.0 * time.get_clock_info("perf_counter").resolution


def run_sweep(spec: SweepSpec, rng: Rng | int) -> BenchReport:
    """Time every (mechanism, variant, length) point of ``spec``.

    Repetitions are interleaved across lengths so that slow phases of a
    shared machine hit every length of a configuration alike. One untimed
    warm-up pass precedes the timed ones; the garbage collector is paused
    while timing.
    """
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    floor = _timer_floor()
    data = [synthetic_workload(rng, spec, point, n) for point, n in enumerate(spec.lengths)]
    batches = [slice(i, min(i + spec.batch, spec.samples)) for i in range(0, spec.samples, spec.batch)]
    report = BenchReport()
    for mech in spec.mechanisms:
        variants = ("reuse",) if mech is Mechanism.SOFTMAX else spec.variants
        for variant in variants:
            cid = config_id(spec.role, mech, variant, spec.batch)

            def one_pass(q, k, v):
                for s in batches:
                    decode_batch(mech, variant, spec.role, q[s], k[s], v[s])

            times: list[list[float]] = [[] for _ in spec.lengths]
            gc_was_enabled = gc.isenabled()
            gc.disable()
            try:
                for qkv in data:
                    one_pass(*qkv)
                for _ in range(spec.repetitions):
                    for i, qkv in enumerate(data):
                        t0 = time.perf_counter()
                        one_pass(*qkv)
                        times[i].append(time.perf_counter() - t0)
            finally:
                if gc_was_enabled:
                    gc.enable()
            for (q, _, _), n, ts in zip(data, spec.lengths, times):
                n1 = q.shape[1]
                calls = len(batches) * n1
                mean = statistics.fmean(ts)
                reliable = min(ts) >= floor
                if not reliable:
                    log.warning("%s at n=%d: elapsed %.3g s below timer floor %.3g s", cid, n, min(ts), floor)
                report.rows.append(BenchRow(
                    config=cid, n1=n1, n2=n, mean_s=mean, std_s=statistics.stdev(ts),
                    throughput_itr_s=calls / mean,
                    flops=decode_attention_flops(mech, spec.role, n1, n, spec.d_kh, spec.d_vh, variant),
                    calls=calls, reliable=reliable))
                log.info("%s n=%d mean=%.4fs", cid, n, mean)
    return report


def write_report(report: BenchReport, fmt: str, path) -> None:
    if not report.rows:
        raise ValueError("refusing to write an empty report")
    records = [r.record() for r in report.rows]
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
            w.writeheader()
            for rec in records:
                w.writerow({k: repr(x) if isinstance(x, float) else x for k, x in rec.items()})
    elif fmt == "json":
        path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _row(rec: dict) -> BenchRow:
    config = str(rec["config"])
    return BenchRow(config=config, n1=int(rec["n1"]), n2=int(rec["n2"]), mean_s=float(rec["mean_s"]),
                    std_s=float(rec["std_s"]), throughput_itr_s=float(rec["throughput_itr_s"]),
                    flops=int(rec["flops"]), reliable=not config.endswith(UNRELIABLE))


def read_report(path, fmt: str | None = None) -> BenchReport:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            return BenchReport([_row(rec) for rec in csv.DictReader(fh)])
    if fmt == "json":
        return BenchReport([_row(rec) for rec in json.loads(path.read_text(encoding="utf-8"))])
    raise ValueError(f"unknown report format {fmt!r}")
