"""
Command-line entry point: ``python -m bayesplat <command>``.

    run      track and map a dataset folder or a simulated sequence
    eval     ATE between two TUM trajectory files
    render   render a saved map along a trajectory
    sim-gen  write a simulated sequence in the TUM folder layout

Every failure the package knows about exits with status 1 and a one-line
message; tracebacks are only shown with -vv.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .config import SIM_PRESETS, load_config, parse_overrides
from .errors import BayesplatError
from .evaluation import EvalDefaults
from .pipeline import load_intrinsics, render_trajectory, run_eval, run_slam, sim_generate, write_artifacts
from .render import RenderDefaults
from .sim import SimDefaults
from .units import format_length_cm

logger = logging.getLogger("bayesplat")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesplat", description="Probabilistic dense RGB-D SLAM with Bayesian Gaussian splats")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug output")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="track and map a sequence")
    source = run.add_mutually_exclusive_group()
    source.add_argument("--dataset", help="TUM-layout folder with rgb.txt and depth.txt")
    source.add_argument("--sim", choices=SIM_PRESETS, help="simulated scene preset")
    run.add_argument("--frames", type=int, help="number of frames to process")
    run.add_argument("--seed", type=int, help="random seed of the simulator")
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key (repeatable)")
    run.add_argument("--output", help="output directory")

    evaluate = commands.add_parser("eval", help="absolute trajectory error")
    evaluate.add_argument("estimate", help="estimated trajectory, TUM format")
    evaluate.add_argument("truth", help="ground-truth trajectory, TUM format")
    evaluate.add_argument("--max-dt", type=float, default=EvalDefaults.MAX_DT, help="association tolerance in seconds")

    render = commands.add_parser("render", help="render a saved map")
    render.add_argument("map", help="map.ply written by a run")
    render.add_argument("trajectory", help="camera-to-world trajectory, TUM format")
    render.add_argument("--intrinsics", help="intrinsics.txt or a dataset folder holding one")
    render.add_argument("--output", default="renders", help="output directory")
    render.add_argument("--opacity-gain", type=float, default=RenderDefaults.OPACITY_GAIN)

    sim = commands.add_parser("sim-gen", help="write a simulated dataset")
    sim.add_argument("preset", choices=SIM_PRESETS)
    sim.add_argument("output", help="output directory")
    sim.add_argument("--frames", type=int, default=SimDefaults.FRAMES)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--density", type=float, help="surface samples per square meter")
    sim.add_argument("--depth-noise", type=float, default=0.0, help="depth noise sigma in meters")
    sim.add_argument("--color-noise", type=float, default=0.0, help="color noise sigma in [0, 1] units")
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def _run(args: argparse.Namespace) -> int:
    overrides = parse_overrides(args.overrides)
    for key in ("dataset", "sim", "frames", "seed", "output"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = (str(value), None)
    config = load_config(args.config, overrides).validate()
    results = run_slam(config)
    write_artifacts(results, config.output)
    summary = results.summary
    ate = format_length_cm(summary.ate_cm / 100.0) if summary.ate_cm is not None else "n/a"
    print(f"{summary.frames} frames, {summary.keyframes} keyframes, {summary.final_components} components, ATE {ate}; results in {config.output}")
    return 0


def _eval(args: argparse.Namespace) -> int:
    result = run_eval(args.estimate, args.truth, args.max_dt)
    print(f"ATE RMSE {result.ate_cm:.4f} cm over {result.pairs} pairs")
    return 0


def _render(args: argparse.Namespace) -> int:
    count = render_trajectory(args.map, args.trajectory, args.output, load_intrinsics(args.intrinsics), args.opacity_gain)
    print(f"rendered {count} views into {args.output}")
    return 0


def _sim_gen(args: argparse.Namespace) -> int:
    count = sim_generate(args.preset, args.output, args.frames, args.seed, args.density, args.depth_noise, args.color_noise)
    print(f"wrote {count} frames to {args.output}")
    return 0


COMMANDS = {"run": _run, "eval": _eval, "render": _render, "sim-gen": _sim_gen}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (BayesplatError, OSError) as exc:
        if args.verbose >= 2:
            logger.exception("command failed")
        raise SystemExit(f"error: {exc}") from None
