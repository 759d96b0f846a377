"""Command-line entry point: ``mlattn <command>``.

Exit codes: 0 success, 1 verification or measurement failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import _backend
from .bench import load_sweep_spec, run_sweep, write_report
from .flops import estimate_flops
from .length import (InputError, LutPredictor, fit_lut, fit_ratio, load_predictor, predict_lut,
                     predict_ratio, read_lut_corpus, read_ratio_corpus, save_predictor)
from .model import build_model, encode, greedy_decode, load_config, load_weights, save_weights, ToyModel
from .numerics import ConfigError, Rng, ShapeError
from .verify import verify_all

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def cmd_verify(args) -> int:
    results = verify_all(args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<24} residual={r.residual!r:<24} tol={r.tolerance:g}  {r.detail}")
    ok = all(r.passed for r in results)
    print(f"backend={_backend.BACKEND} seed={args.seed}: {'all suites passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    spec = load_sweep_spec(args.spec)
    report = run_sweep(spec, Rng(args.seed))
    write_report(report, args.format, args.out)
    flagged = [r for r in report.rows if not r.reliable]
    print(f"wrote {len(report.rows)} rows to {args.out} (backend={_backend.BACKEND})")
    if flagged:
        print(f"{len(flagged)} rows are below the timer floor and flagged unreliable", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    total, parts = estimate_flops(cfg, args.n_src, args.n_tgt, breakdown=True)
    print(f"total {total} ({total / 1e9:.3f} G)")
    for name, count in parts.items():
        print(f"  {name:<14} {count}")
    return EXIT_OK


def cmd_fit_length(args) -> int:
    if args.kind == "ratio":
        corpus = read_ratio_corpus(args.corpus)
        mode = "quantile" if args.quantile is not None else "average"
        pred = fit_ratio(corpus, mode, args.quantile if args.quantile is not None else 0.9)
        print(f"alpha = {pred.alpha!r} from {len(corpus)} pairs ({mode})")
    else:
        if args.quantile is not None:
            raise InputError("--quantile applies to ratio fitting only")
        pred = fit_lut(read_lut_corpus(args.corpus))
        if args.dampening != 1.0:
            pred = pred.with_dampening(args.dampening)
        print(f"{len(pred.table)} tokens, fallback = {pred.fallback!r}")
    save_predictor(pred, args.out)
    return EXIT_OK


def cmd_predict_length(args) -> int:
    pred = load_predictor(args.predictor)
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if isinstance(pred, LutPredictor):
                print(predict_lut(line.split(), pred))
            else:
                try:
                    src_len = int(line)
                except ValueError:
                    raise InputError(f"{args.input}:{lineno}: expected a source length") from None
                print(predict_ratio(src_len, pred))
    return EXIT_OK


def cmd_decode_demo(args) -> int:
    cfg = load_config(args.config)
    rng = Rng(args.seed)
    if args.weights:
        model = ToyModel.from_params(cfg, load_weights(args.weights), args.seed)
    else:
        model = build_model(cfg, rng)
    if args.save_weights:
        save_weights(model, args.save_weights)
    src_len = args.src_len or cfg.src_len
    src = rng.child(99).uniform((src_len, cfg.d_model), -1.0, 1.0)
    tokens = args.tokens.split() if args.tokens else None
    enc = encode(model, src)
    out = greedy_decode(model, enc, args.steps, src_tokens=tokens)
    print(f"config esa={cfg.esa.value} dsa={cfg.dsa.value} dca={cfg.dca.value} "
          f"d_model={cfg.d_model} heads={cfg.heads} backend={_backend.BACKEND}")
    print(f"source rows {src_len}, decoded {out.shape[0]} steps, checksum {float(out.sum())!r}")
    print("last row[:4]", np.array2string(out[-1, :4], precision=6))
    if args.check_oracle:
        ref = greedy_decode(model, encode(model, src, oracle=True), args.steps, mode="recompute",
                            src_tokens=tokens)
        err = float(np.max(np.abs(out - ref)))
        ok = err <= 1e-8
        print(f"{'PASS' if ok else 'FAIL'}  incremental vs recompute max |diff| = {err:.3e} (tol 1e-8)")
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify", help="run the oracle/invariant self-check suites")
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="run a latency sweep from a JSON spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("flops", help="estimate forward FLOPs for a model config")
    s.add_argument("--config", required=True)
    s.add_argument("--n-src", type=int, required=True)
    s.add_argument("--n-tgt", type=int, required=True)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("fit-length", help="fit a ratio or LUT length predictor")
    s.add_argument("kind", choices=("ratio", "lut"))
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quantile", type=float)
    s.add_argument("--dampening", type=float, default=1.0)
    s.set_defaults(func=cmd_fit_length)

    s = sub.add_parser("predict-length", help="predict target lengths, one per input line")
    s.add_argument("--predictor", required=True)
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_predict_length)

    s = sub.add_parser("decode-demo", help="greedy-decode a random toy model")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--src-len", type=int)
    s.add_argument("--tokens", help="source tokens for LUT length prediction")
    s.add_argument("--weights", help="load weights from a container file")
    s.add_argument("--save-weights", help="write the model's weights to a container file")
    s.add_argument("--check-oracle", action="store_true")
    s.set_defaults(func=cmd_decode_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, ShapeError, ValueError) as exc:
        print(f"mlattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mlattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
