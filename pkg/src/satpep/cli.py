"""Command-line interface.

    satpep run --config <file-or-preset> --out <dir> [--jobs N]
               [--repetitions N] [--seed S] [--event-logs]
    satpep validate --config <file-or-preset>
    satpep presets

Exit codes: 0 success, 1 configuration error, 2 one or more runs failed.
"""

from __future__ import annotations

import argparse
import sys

from .harness import (
    MEASUREMENTS,
    ParseError,
    ValidationError,
    load_config,
    preset_names,
    run_matrix,
    _presets,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satpep")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario matrix and write CSV results")
    run.add_argument("--config", required=True, help="config file path or preset name")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    run.add_argument("--repetitions", type=int, default=None, help="override repetitions")
    run.add_argument("--seed", type=int, default=None, help="override base seed")
    run.add_argument("--event-logs", action="store_true", help="write one JSONL event log per run")

    val = sub.add_parser("validate", help="parse and validate a config")
    val.add_argument("--config", required=True, help="config file path or preset name")

    sub.add_parser("presets", help="print the built-in scenario grid")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "presets":
        return _cmd_presets()
    try:
        scenarios = load_config(args.config)
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.command == "validate":
        for sc in scenarios:
            print(f"ok: {sc.name} (rtt {sc.rtt_ms:g}ms, loss {sc.loss_pct:g}%, "
                  f"{len(sc.measurements)} measurements, {sc.repetitions} repetitions)")
        return 0
    records, failures = run_matrix(
        scenarios,
        args.out,
        jobs=args.jobs,
        repetitions=args.repetitions,
        base_seed=args.seed,
        event_logs=args.event_logs,
    )
    print(f"{len(records)} runs written to {args.out}" +
          (f" ({failures} failed)" if failures else ""))
    return 2 if failures else 0


def _cmd_presets() -> int:
    for name in preset_names():
        scenarios = _presets(name)
        print(f"{name}:")
        for sc in scenarios:
            print(f"  {sc.name}: satcom {sc.delay_schedule()[0][1]:g}ms one-way, "
                  f"internet {sc.internet_delay_ms:g}ms, rtt {sc.rtt_ms:g}ms, "
                  f"loss {sc.loss_pct:g}%, forward {sc.forward_rate_mbps:g}Mbps, "
                  f"measurements: {', '.join(MEASUREMENTS)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
