"""Command-line entry point: ``platoonlab <subcommand> --config FILE --out DIR``.

Exit codes: 0 on success, 1 on bad input, 2 when the invariant suite fails,
3 when a run diverges where it should not.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checks import run_checks
from .experiments import RUNNERS, ExperimentError, UnexpectedDivergence, load_experiment, write_csv
from .model import ConfigError

EXIT_OK, EXIT_INPUT, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3

SUBCOMMANDS = {
    "sigma-scan": "sigma_scan",
    "hmax-scan": "hmax_scan",
    "transient": "transient",
    "metrics-scan": "metrics_scan",
    "stability-map": "stability_map",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoonlab", description="Platoon scaling experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*SUBCOMMANDS, "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML file with platoon keys and optional [sweep]/[run] tables")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        if name != "validate":
            p.add_argument("--dt", type=float, help="integration step")
            p.add_argument("--t-end", type=float, help="simulation horizon")
            p.add_argument("--n-max", type=int, help="largest string length in the stability scan")
            p.add_argument("--workers", type=int, help="size of the process pool")
        else:
            p.add_argument("--seed", type=int, default=2024)
    return parser


def _validate(args) -> int:
    results = run_checks(args.seed)
    rows = [{"check": r.name, "passed": r.passed, "detail": r.detail} for r in results]
    write_csv(args.out / "validate.csv", ("check", "passed", "detail"), rows)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "validate":
            return _validate(args)
        kind = SUBCOMMANDS[args.command]
        spec = load_experiment(
            args.config, kind, args.out, dt=args.dt, t_end=args.t_end, n_max=args.n_max, workers=args.workers
        )
        result = RUNNERS[kind](spec)
    except UnexpectedDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, ExperimentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for key, value in sorted(result.get("summary", {}).items()):
        print(f"{key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
