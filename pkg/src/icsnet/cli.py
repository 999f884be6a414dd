"""Command-line entry point.

Exit codes: 0 success; 2 configuration/validation; 3 planning; 4 simulation;
5 collection/write; 6 verification failed; 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import (
    ActorError, CapacityError, ConfigError, IcsnetError, ScheduleOverflow,
    StageError, ValidationError,
)

EXIT_CONFIG = 2
EXIT_PLAN = 3
EXIT_SIMULATE = 4
EXIT_WRITE = 5
EXIT_VERIFY = 6

_STAGE_EXIT = {
    "setup": EXIT_CONFIG,
    "parse": EXIT_CONFIG,
    "topology": EXIT_CONFIG,
    "plan": EXIT_PLAN,
    "fabric": EXIT_SIMULATE,
    "simulate": EXIT_SIMULATE,
    "write": EXIT_WRITE,
}


def _setup_logging():
    level = os.environ.get("ICSNET_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, StageError):
        return _STAGE_EXIT.get(exc.stage, 1)
    if isinstance(exc, (ValidationError, ConfigError, CapacityError)):
        return EXIT_CONFIG
    if isinstance(exc, ScheduleOverflow):
        return EXIT_PLAN
    if isinstance(exc, ActorError):
        return EXIT_SIMULATE
    return 1


def cmd_run(args) -> int:
    from pathlib import Path

    from . import coordinator, runtime
    cfg = coordinator.parse_scenario(Path(args.scenario).read_bytes())
    effective_mode = args.mode or cfg.mode
    out_dir = args.out or cfg.outputs.get("dir", "out")
    if effective_mode == "paced":
        from .gateway import run_paced_with_gateway
        manifest = run_paced_with_gateway(args.scenario, out_dir, seed=args.seed)
    else:
        manifest = runtime.run(args.scenario, out_dir, mode=args.mode, seed=args.seed)
    args.out = out_dir
    print(f"run complete: {args.out}")
    print(f"  dataset rows: {manifest['counts']['dataset_rows']}")
    print(f"  pcap frames:  {manifest['counts']['pcap_frames']}")
    print(f"  seed:         {manifest['seed']}")
    return 0


def cmd_plan(args) -> int:
    from . import runtime
    result = runtime.plan_only(args.scenario)
    print(json.dumps(result, indent=2))
    return EXIT_PLAN if result["unreachable"] else 0


def cmd_verify(args) -> int:
    from . import runtime
    failures = runtime.verify(args.out)
    if failures:
        for failure in failures:
            print(f"FAIL {failure}")
        return EXIT_VERIFY
    print("verify: ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icsnet",
        description="Deterministic ICS honeynet simulator and labeled-dataset generator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario end to end")
    p_run.add_argument("scenario", help="scenario JSON file")
    p_run.add_argument("--out", default=None,
                       help="output directory, must be empty (default: the "
                            "scenario's outputs.dir, else ./out)")
    p_run.add_argument("--mode", choices=["fast", "paced"], default=None,
                       help="override the scenario's mode")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed")
    p_run.set_defaults(fn=cmd_run)

    p_plan = sub.add_parser("plan", help="print attack plans without simulating")
    p_plan.add_argument("scenario", help="scenario JSON file")
    p_plan.set_defaults(fn=cmd_plan)

    p_verify = sub.add_parser("verify", help="recheck a finished run directory")
    p_verify.add_argument("out", help="run output directory")
    p_verify.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except IcsnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
