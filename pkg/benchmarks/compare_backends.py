"""Time the compiled and numpy kernel backends on identical decode workloads.

    python3 benchmarks/compare_backends.py [--lengths 128 256 512] [--d 64] [--out FILE.csv]

Both backends run the same synthetic Q/K/V through every decode path; the
script also checks that their outputs agree before reporting timings.
"""
import argparse
import csv
import statistics
import sys
import time

import numpy as np

from mlattn import _backend
from mlattn.attention import Mechanism
from mlattn.bench import SweepSpec, decode_batch, synthetic_workload
from mlattn.numerics import Rng

PATHS = [(Mechanism.SOFTMAX, "reuse"), (Mechanism.RELU, "reuse"), (Mechanism.RELU, "naive"),
         (Mechanism.COSFORMER, "reuse"), (Mechanism.COSFORMER, "naive")]


def time_path(mech, variant, role, qkv, reps):
    decode_batch(mech, variant, role, *qkv)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        decode_batch(mech, variant, role, *qkv)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", type=int, nargs="+", default=[128, 256, 512])
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--role", choices=("self", "cross"), default="self")
    ap.add_argument("--out", help="optional CSV output")
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "compiled" not in backends:
        print("compiled backend not built; only the numpy fallback is available", file=sys.stderr)
    spec = SweepSpec(lengths=tuple(args.lengths), d_kh=args.d, d_vh=args.d, samples=args.batch,
                     batch=args.batch, role=args.role)
    rows = []
    for point, n in enumerate(args.lengths):
        qkv = synthetic_workload(Rng(0), spec, point, n)
        for mech, variant in PATHS:
            timings, outputs = {}, {}
            for name in backends:
                _backend.use(name)
                outputs[name] = decode_batch(mech, variant, args.role, *qkv)
                timings[name] = time_path(mech, variant, args.role, qkv, args.reps)
            diff = max(float(np.max(np.abs(o - outputs["python"]))) for o in outputs.values())
            label = "softmax" if mech is Mechanism.SOFTMAX else f"{mech.value}/{variant}"
            row = {"path": label, "n": n, "python_s": timings["python"],
                   "compiled_s": timings.get("compiled", float("nan")), "max_abs_diff": diff}
            row["speedup"] = row["python_s"] / row["compiled_s"]
            rows.append(row)
            print(f"{label:<18} n={n:<6} python {row['python_s']:.4f}s  compiled {row['compiled_s']:.4f}s"
                  f"  speedup x{row['speedup']:.2f}  max|diff| {diff:.1e}")
    _backend.use("auto")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
