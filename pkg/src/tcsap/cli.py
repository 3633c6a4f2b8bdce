"""Command line runner: ``tcsap run`` and ``tcsap sweep``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .scenario import ScenarioError, parse_scenario, parse_sweep
from .simnet.runner import run_scenario
from .sweep import format_run_csv, run_sweep

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("tcsap")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcsap", description="Run secure address autoconfiguration scenarios.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run one scenario"), ("sweep", "run a parameter sweep")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("file", type=Path, help="scenario file (TOML)")
        s.add_argument("--seed", type=int, default=0, help="seed (sweeps use seed, seed+1, ...)")
        s.add_argument("--out", type=Path, help="CSV output path (default stdout)")
        s.add_argument("--trace", type=Path, help="write the event trace here (run only)")
        s.add_argument("--jobs", type=int, default=1, help="parallel worker processes (sweep only)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = args.file.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror}", file=sys.stderr)
        return EXIT_INVALID

    try:
        if args.command == "run":
            scenario = parse_scenario(text)
        else:
            sweep = parse_sweep(text)
            scenario = sweep.base
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    for w in scenario.warnings:
        log.warning(w)
    if args.jobs < 1:
        print("error: --jobs must be ≥ 1", file=sys.stderr)
        return EXIT_INVALID

    try:
        if args.command == "run":
            metrics, trace = run_scenario(scenario, args.seed, keep_trace=args.trace is not None)
            if args.trace is not None:
                args.trace.write_text("".join(line + "\n" for line in trace), encoding="utf-8")
            _emit(format_run_csv(metrics, args.seed), args.out)
        else:
            if args.trace is not None:
                log.warning("--trace is ignored for sweeps")
            csv_text = run_sweep(sweep, args.seed, args.jobs)
            _emit(csv_text, args.out)
            failed = [line for line in csv_text.splitlines()[1:] if line.split(",")[1] != "mean" and not line.endswith(",")]
            if failed:
                log.warning("%d run(s) failed, see the error column", len(failed))
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
