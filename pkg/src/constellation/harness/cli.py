"""Command line interface.

    constellation run --config exp.cfg [--seed N] [--out DIR] [--coalescing on|off]
    constellation verify-convergence --config exp.cfg
    constellation report --run DIR [--out DIR]

Exit codes: 0 all checks passed, 1 a check failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys

from ..types import ConfigError
from .config import load_experiment
from .experiments import run_experiment
from .report import MetricsReport

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="constellation",
        description="Replicated-middlebox experiments in a simulated WAN")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its report")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--coalescing", choices=("on", "off"), default=None)
    run.add_argument("--figures", action="store_true",
                     help="also render figures from the written report")

    verify = sub.add_parser("verify-convergence",
                            help="run the convergence fuzz for a config")
    verify.add_argument("--config", required=True)
    verify.add_argument("--seed", type=int, default=None)

    rep = sub.add_parser("report", help="render figures from a run directory")
    rep.add_argument("--run", required=True)
    rep.add_argument("--out", default=None)
    return parser


def _print_outcome(report: MetricsReport) -> None:
    summary = report.to_summary_dict()
    print(f"experiment: {report.experiment}")
    print(f"seed: {report.seed}")
    print(f"quiesced: {str(report.quiesced).lower()}")
    if report.converged is not None:
        print(f"converged: {str(report.converged).lower()}")
    if report.experiment == "leaked-packets":
        for instance, leaked, expected in report.leaked:
            print(f"leaked[{instance}]: {leaked} (replay expectation {expected})")
    if report.experiment == "coalescing":
        print(f"bytes on/off: {summary['bytes_coalescing_on']}"
              f"/{summary['bytes_coalescing_off']}")
        print(f"savings ratio: {summary['savings_ratio']}")
    if report.experiment in ("scale-out", "scale-in"):
        print(f"records missing: {summary['records_missing']}")


def _check_failed(report: MetricsReport) -> bool:
    if not report.quiesced:
        return True
    return report.converged is False


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            coalescing = None if args.coalescing is None else args.coalescing == "on"
            cfg = load_experiment(args.config, seed_override=args.seed,
                                  out_override=args.out,
                                  coalescing_override=coalescing)
            report = run_experiment(cfg)
            report.write(cfg.out_dir)
            _print_outcome(report)
            print(f"report written to {cfg.out_dir}")
            if args.figures:
                from .figures import render_run
                for path in render_run(cfg.out_dir):
                    print(f"figure written to {path}")
            return EXIT_CHECK_FAILED if _check_failed(report) else EXIT_OK

        if args.command == "verify-convergence":
            cfg = load_experiment(args.config, seed_override=args.seed)
            cfg.kind = "convergence-fuzz"
            report = run_experiment(cfg)
            print(f"converged: {str(bool(report.converged)).lower()}")
            return EXIT_OK if report.converged else EXIT_CHECK_FAILED

        if args.command == "report":
            from .figures import render_run
            written = render_run(args.run, args.out)
            for path in written:
                print(f"figure written to {path}")
            if not written:
                print("no report files found", file=sys.stderr)
                return EXIT_CONFIG
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
