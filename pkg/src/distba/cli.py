"""Command-line entry point: ``distba solve`` and ``distba generate``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .comms import CollectiveError
from .linear import SingularBlockError
from .problem import BALFormatError, DegenerateDepthError, load_bal, mse
from .solver import IterationRecord, SolverConfig, SolverState, solve
from .synthetic import SyntheticConfig, write_synthetic

log = logging.getLogger("distba")

REPORT_SCHEMA = 1
EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3


def _num(x):
    """JSON-safe float: non-finite values become null."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _record_json(rec: IterationRecord) -> dict:
    return {
        "iteration": rec.iteration,
        "cost": _num(rec.cost),
        "mse": _num(rec.mse),
        "lambda": _num(rec.lam),
        "pcg_iterations": rec.pcg_iterations,
        "accepted": rec.accepted,
        "wall_seconds": _num(rec.wall_time),
    }


def build_report(dataset: str, config: SolverConfig, num_cameras: int, num_points: int, num_observations: int,
                 initial_cost: float | None, records: list[IterationRecord], termination: str,
                 final_cost: float | None, error: str | None = None) -> dict:
    """Run report with keys in a fixed order (so re-serialising is byte-stable)."""
    conv = config.mse_convention
    return {
        "schema": REPORT_SCHEMA,
        "dataset": dataset,
        "workers": config.workers,
        "precision": config.precision,
        "config": {k: v for k, v in asdict(config).items()},
        "num_cameras": num_cameras,
        "num_points": num_points,
        "num_observations": num_observations,
        "mse_convention": conv,
        "initial_cost": _num(initial_cost),
        "initial_mse": _num(None if initial_cost is None else mse(initial_cost, num_observations, conv)),
        "iterations": [_record_json(r) for r in records],
        "final_cost": _num(final_cost),
        "final_mse": _num(None if final_cost is None else mse(final_cost, num_observations, conv)),
        "termination": termination,
        "error": error,
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def _write_report(report: dict, path: str | None) -> None:
    text = dump_report(report)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_solve(args: argparse.Namespace) -> int:
    try:
        config = SolverConfig(
            precision=args.precision,
            workers=args.workers,
            max_iterations=args.max_iters,
            pcg_tol=args.pcg_tol,
            pcg_max_iters=args.pcg_max_iters,
            lambda0=args.lambda0,
            damping=args.damping,
            mse_convention=args.mse_convention,
            jacobian=args.jacobian,
            shuffle_seed=args.shuffle_seed,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        problem = load_bal(args.input, dtype=config.dtype)
    except (OSError, BALFormatError, UnicodeDecodeError) as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if config.workers > problem.num_observations:
        print(f"error: --workers {config.workers} exceeds {problem.num_observations} observations", file=sys.stderr)
        return EXIT_INPUT

    dataset = Path(args.input).name
    records: list[IterationRecord] = []

    def on_iteration(rank: int, rec: IterationRecord) -> None:
        if rank != 0:
            return
        records.append(rec)
        if args.log_every and rec.iteration % args.log_every == 0:
            log.info("iter %3d cost %.6e mse %.6f lambda %.3e pcg %d %s", rec.iteration, rec.cost,
                     rec.mse, rec.lam, rec.pcg_iterations, "accept" if rec.accepted else "reject")

    dims = (problem.num_cameras, problem.num_points, problem.num_observations)
    try:
        state: SolverState = solve(problem, config, callback=on_iteration)
    except (DegenerateDepthError, SingularBlockError, CollectiveError, ArithmeticError) as exc:
        last = records[-1].cost if records else None
        _write_report(build_report(dataset, config, *dims, None, records, "error", last, str(exc)), args.output)
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    report = build_report(dataset, config, *dims, state.initial_cost, state.history, state.termination, state.cost)
    _write_report(report, args.output)
    log.info("%s: %s after %d iterations, final MSE %.6f", dataset, state.termination, state.iteration,
             report["final_mse"] if report["final_mse"] is not None else float("nan"))
    return EXIT_SOLVER if state.termination == "stalled" else EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        if args.scale is not None:
            cfg = SyntheticConfig.scaled(
                args.scale, num_cameras=args.cameras, num_points=args.points,
                obs_per_point=args.obs_per_point, seed=args.seed, pixel_noise=args.pixel_noise,
            )
        else:
            cfg = SyntheticConfig(
                num_cameras=args.cameras or 20, num_points=args.points or 80,
                obs_per_point=args.obs_per_point or 10, seed=args.seed, pixel_noise=args.pixel_noise,
            )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.output:
        with open(args.output, "w", encoding="ascii") as fh:
            write_synthetic(cfg, fh)
    else:
        write_synthetic(cfg, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distba", description="Multi-worker bundle adjustment")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a BAL problem")
    s.add_argument("--input", required=True, help="BAL file (.txt, .bz2 or .gz)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--precision", choices=["fp32", "fp64"], default="fp64")
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--pcg-tol", type=float, default=1e-6)
    s.add_argument("--pcg-max-iters", type=int, default=500)
    s.add_argument("--lambda0", type=float, default=1e-4)
    s.add_argument("--damping", choices=["identity", "diag-scaled"], default="identity")
    s.add_argument("--mse-convention", choices=["N", "2N"], default="N")
    s.add_argument("--jacobian", choices=["auto", "analytic"], default="auto")
    s.add_argument("--shuffle-seed", type=int, default=None, help="shuffle edges before partitioning")
    s.add_argument("--output", help="write the JSON report here instead of stdout")
    s.add_argument("--log-every", type=int, default=0, help="log progress every N iterations")
    s.set_defaults(func=cmd_solve)

    g = sub.add_parser("generate", help="write a synthetic ring-of-cameras BAL problem")
    g.add_argument("--cameras", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--obs-per-point", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=float, default=None,
                   help="multiply the full-scale recipe (20000/80000/1000); explicit counts override")
    g.add_argument("--pixel-noise", type=float, default=0.0, help="Gaussian pixel noise sigma")
    g.add_argument("--output", help="output path (default stdout)")
    g.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except BrokenPipeError:
        # reader closed early (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
