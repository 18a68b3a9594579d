"""Command-line driver.

Exit codes: 0 success, 1 configuration error, 2 numerical-invariant failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import __version__
from .ensemble import FIELD, OFFSET
from .report import ConfigError, ExperimentConfig, load_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2

# figure id -> list of (subdirectory, config)
FIGURES = {
    "fig1a": [("", ExperimentConfig(ensemble_kind=FIELD, analyses=("trajectories",)))],
    "fig1b": [("", ExperimentConfig(ensemble_kind=OFFSET, analyses=("trajectories",)))],
    "fig2": [("", ExperimentConfig(analyses=("canonical", "area")))],
    "fig3": [("", ExperimentConfig(ensemble_kind=FIELD, analyses=("stability",)))],
    "fig4": [("", ExperimentConfig(ensemble_kind=FIELD, analyses=("stability",)))],
    "fig5": [("", ExperimentConfig(ensemble_kind=OFFSET, analyses=("stability",)))],
    "fig6": [("", ExperimentConfig(ensemble_kind=OFFSET, analyses=("stability",)))],
    "fig7": [
        ("field", ExperimentConfig(ensemble_kind=FIELD, analyses=("width",))),
        ("offset", ExperimentConfig(ensemble_kind=OFFSET, analyses=("width",))),
    ],
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bloch-caustics",
        description="Ensemble stability and caustic analysis of composite pulses.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out-dir", type=Path, default=None, help="override output.dir")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for swarm propagation")
        sp.add_argument("--strict", action="store_true",
                        help="treat numerical warnings (e.g. ambiguous unwrapping) as invariant failures")

    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", type=Path)
    common(run)

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config", type=Path)

    rep = sub.add_parser("repro", help="emit the data behind one figure")
    rep.add_argument("figure", choices=sorted(FIGURES))
    common(rep)
    return p


def _execute(cfg: ExperimentConfig, out_dir, threads: int, strict: bool) -> int:
    with warnings.catch_warnings():
        if strict:
            warnings.simplefilter("error", RuntimeWarning)
        try:
            report = run_experiment(cfg, out_dir=out_dir, threads=threads)
        except (RuntimeWarning, RuntimeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVARIANT
    for failure in report.failures:
        print(f"invariant failure: {failure}", file=sys.stderr)
    print(f"wrote {sum(len(v) for v in report.files.values())} file(s) to {report.out_dir}")
    return EXIT_OK if report.ok else EXIT_INVARIANT


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "validate":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{args.config}: ok ({', '.join(cfg.analyses)}; {cfg.ensemble_kind})")
        return EXIT_OK
    if args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return _execute(cfg, args.out_dir, args.threads, args.strict)
    base = args.out_dir if args.out_dir is not None else Path("results") / args.figure
    status = EXIT_OK
    for sub, cfg in FIGURES[args.figure]:
        out = base / sub if sub else base
        status = max(status, _execute(replace(cfg, output_dir=str(out)), out, args.threads, args.strict))
    return status


if __name__ == "__main__":
    sys.exit(main())
