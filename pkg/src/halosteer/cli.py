"""Command-line interface for staged stationkeeping runs.

Each subcommand runs the pipeline up to one stage: ``correct-orbit`` stops
after differential correction, ``precompute`` after the cached propagation
artifacts, ``solve`` after the conic programs, ``montecarlo`` after the
closed-loop simulation, and ``report``/``all`` emit the full file set.
Timestamps appear only in the log stream; result files are reproducible
byte for byte for a fixed scenario and seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from halosteer.pipeline import EXIT_VALIDATION, run_pipeline
from halosteer.scenario import (
    NORM_MODES,
    OBJECTIVE_KINDS,
    Scenario,
    ScenarioError,
    default_scenario_path,
    load_scenario,
)

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "HALOSTEER_CACHE"
DEFAULT_CACHE = "~/.cache/halosteer"

_COMMAND_STAGES = {
    "correct-orbit": ("correct",),
    "precompute": ("gcoefs",),
    "solve": ("solve",),
    "montecarlo": ("montecarlo",),
    "report": ("report",),
    "all": ("report",),
}


def _seed_type(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit int")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halosteer",
        description=(
            "Nonlinearity-minimizing impulsive covariance steering for "
            "halo-orbit stationkeeping."
        ),
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--scenario",
        type=Path,
        default=None,
        help="scenario file (default: packaged reference scenario)",
    )
    common.add_argument(
        "--objective",
        choices=OBJECTIVE_KINDS,
        default=None,
        help="steering objective(s) to solve (default: scenario setting)",
    )
    common.add_argument(
        "--seed",
        type=_seed_type,
        default=None,
        help="Monte Carlo master seed (default: scenario setting)",
    )
    common.add_argument(
        "--cache",
        type=Path,
        default=None,
        help=f"cache directory (default: ${CACHE_ENV_VAR} or {DEFAULT_CACHE})",
    )
    common.add_argument(
        "--out",
        type=Path,
        default=Path("halosteer_out"),
        help="output directory for result files",
    )
    common.add_argument(
        "--norm-mode",
        choices=NORM_MODES,
        default=None,
        help="covariance-factor norm handling (default: scenario setting)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(
        "correct-orbit", parents=[common], help="differentially correct the reference"
    )
    sub.add_parser(
        "precompute", parents=[common], help="build and cache plan and g-coefficients"
    )
    sub.add_parser("solve", parents=[common], help="solve the steering program(s)")
    sub.add_parser(
        "montecarlo", parents=[common], help="run the closed-loop Monte Carlo"
    )
    sub.add_parser("report", parents=[common], help="emit comparison tables")
    sub.add_parser("all", parents=[common], help="run every stage")
    return parser


def resolve_cache_dir(flag_value: Path | None) -> Path:
    if flag_value is not None:
        return flag_value
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path(DEFAULT_CACHE).expanduser()


def _load(args: argparse.Namespace) -> Scenario:
    path = args.scenario if args.scenario is not None else default_scenario_path()
    scenario = load_scenario(path)
    overrides = {}
    if args.objective is not None:
        overrides["objective"] = args.objective
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.norm_mode is not None:
        overrides["norm_mode"] = args.norm_mode
    return scenario.with_overrides(**overrides) if overrides else scenario


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        scenario = _load(args)
    except (ScenarioError, OSError) as exc:
        logger.error("scenario rejected: %s", exc)
        return EXIT_VALIDATION
    stages = _COMMAND_STAGES[args.command]
    return run_pipeline(
        scenario,
        stages=stages,
        cache_dir=resolve_cache_dir(args.cache),
        out_dir=args.out,
    )


if __name__ == "__main__":
    raise SystemExit(main())
