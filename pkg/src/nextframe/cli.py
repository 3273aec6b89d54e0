"""Command line entry point: ``nextframe run|sweep|predict|check|gradcheck``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__, bench
from .data import DataError, ingest_frames, preprocess, write_pgm
from .model import ConfigError
from .tensor import ShapeError, TensorFormatError, write_tensor

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_FAILED = 3


def _run(args) -> int:
    result = bench.run_experiment(args.config, args.out)
    print(f"wrote {result.output_dir / 'summary.csv'}")
    for row in result.rows:
        print(f"  {row['variant']}: {row['status']}")
    return EXIT_FAILED if result.failed else EXIT_OK


def _sweep(args) -> int:
    result = bench.timestep_sweep(args.config, args.out)
    print(f"wrote {result.output_dir / 'sweep_final.csv'}")
    for row in result.final:
        value = row["final_train_loss"]
        shown = "failed" if value is None else f"{value:.6f}"
        print(f"  {row['variant']} t={row['timestep']}: {shown}")
    return EXIT_FAILED if result.failed else EXIT_OK


def _predict(args) -> int:
    from .training import load_checkpoint, predict_next

    try:
        m = load_checkpoint(args.checkpoint)
    except (OSError, TensorFormatError, ShapeError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    seq = preprocess(ingest_frames(args.manifest), m.config.resolution)
    t = m.config.timestep
    if len(seq) < t:
        raise DataError(f"manifest lists {len(seq)} frames; the model needs {t}")
    frame = predict_next(m, seq.frames[-t:])
    out = Path(args.out) if args.out else Path(os.environ.get(bench.OUTPUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "prediction.pgm", frame)
    write_tensor(out / "prediction.fct", frame)
    print(f"wrote {out / 'prediction.pgm'}")
    return EXIT_OK


def _check(args) -> int:
    problems = bench.check_run(args.run_dir)
    for p in problems:
        print(f"FAIL {p}")
    if problems:
        return EXIT_DATA
    print(f"OK {args.run_dir}")
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, e2e_instances=args.e2e_instances, seed=args.seed,
                        report=lambda r: print(r.line(), flush=True), e2e_coords=args.e2e_coords or None)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nextframe", description=__doc__)
    parser.add_argument("--version", action="version", version=f"nextframe {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--deterministic", action="store_true",
                        help=f"single-threaded BLAS (also enabled by {bench.DETERMINISTIC_ENV}=1)")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train every variant in a config")
    p.add_argument("config")
    p.add_argument("--out", help=f"output directory (overrides {bench.OUTPUT_ENV} and the config)")
    p.set_defaults(func=_run)

    p = sub.add_parser("sweep", help="train every variant across the configured timestep range")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=_sweep)

    p = sub.add_parser("predict", help="predict the frame after the last frames of a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.set_defaults(func=_predict)

    p = sub.add_parser("check", help="verify checksums and recompute every number of a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=_check)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--e2e-instances", type=int, default=20)
    p.add_argument("--e2e-coords", type=int, default=12,
                   help="coordinates sampled per parameter tensor in end-to-end checks (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with bench.single_threaded(args.deterministic or bench.deterministic_requested()):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TensorFormatError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
