"""Command-line interface: run experiments, verify oracles, export plots.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical
failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .dynamics import Gaussian
from .manifest import (
    build_manifest,
    read_trajectory_csv,
    write_json_atomic,
    write_trajectory_csv,
)
from .plots import export_plots
from .rewards import Cylinder, DoubleWedge, ObstaclePenalty
from .runconfig import (
    ConfigError,
    apply_overrides,
    load_config,
    merge_with_preset,
    preset_config,
    resolve,
)
from .solver import run as run_solver
from .verification import LQOracle, UniformGrid
from .verification.checks import (
    check_hjb_residual,
    check_initial_derivative_grid,
    check_initial_derivative_lq,
    check_lq_adjoint_grid,
    check_mp_fixed_point,
    check_needle_prehistory,
    check_perturbation_order,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_VERIFY = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpdc",
        description="Maximum-principle control of probability densities")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve a preset or configured problem")
    p_run.add_argument("--config", metavar="PATH", help="JSON run config")
    p_run.add_argument("--preset", metavar="NAME",
                       help="start from a named preset (lq, test1, test2, "
                            "test2_d100, test3)")
    p_run.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key "
                       "(dotted path, repeatable)")
    p_run.add_argument("--out", metavar="DIR", help="output directory")
    p_run.add_argument("--seed", type=int, help="master seed")

    p_verify = sub.add_parser("verify", help="run oracle check suites")
    p_verify.add_argument("--suite", default="all",
                          choices=["all", "lq", "perturbation", "hjb",
                                   "initial-deriv"])
    p_verify.add_argument("--out", metavar="PATH", help="write the JSON report")
    p_verify.add_argument("--seed", type=int, default=0)

    p_plot = sub.add_parser("plot", help="export SVG scatter plots for a run")
    p_plot.add_argument("--run", required=True, metavar="DIR",
                        help="directory containing trajectory.csv + manifest.json")
    p_plot.add_argument("--pairs", nargs="*", default=None, metavar="A,B",
                        help="coordinate pairs, e.g. 0,1 2,3 (empty list plots "
                             "nothing)")
    p_plot.add_argument("--out", metavar="DIR", help="output directory")
    return parser


def _cmd_run(args) -> int:
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.preset:
            cfg = merge_with_preset({"preset": args.preset})
        else:
            print("error: provide --config or --preset", file=sys.stderr)
            return EXIT_CONFIG
        cfg = apply_overrides(cfg, args.sets)
        if args.out:
            cfg["out_dir"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
        setup = resolve(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    t0 = time.perf_counter()
    state = run_solver(setup.problem, setup.solver)
    wall = time.perf_counter() - t0
    out_dir = setup.out_dir
    os.makedirs(out_dir, exist_ok=True)
    artifacts = {}
    if state.trajectory is not None:
        csv_path = os.path.join(out_dir, "trajectory.csv")
        write_trajectory_csv(csv_path, state.trajectory)
        artifacts["trajectory_csv"] = csv_path
        frames = {float(t): state.trajectory.ensemble_at(t).points
                  for t in state.trajectory.checkpoints}
        obstacle = _obstacle_of(setup)
        plot_paths = export_plots(frames, setup.problem.dim, out_dir,
                                  obstacle=obstacle,
                                  title=setup.config.get("preset", "run"))
        artifacts["plots"] = plot_paths
    manifest = build_manifest(setup.config, state.records, state.status,
                              artifacts, wall)
    write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    print(json.dumps({"status": state.status,
                      "iterations": len(state.records) - 1,
                      "final_reward": state.records[-1]["reward"],
                      "out_dir": out_dir}))
    if state.status.startswith("aborted"):
        return EXIT_NUMERICAL
    return EXIT_OK


def _obstacle_of(setup):
    for term in setup.problem.rewards.running:
        if isinstance(term, ObstaclePenalty):
            return term.shape
    return None


def _verify_checks(suite: str, seed: int) -> list:
    checks = []
    if suite in ("all", "lq"):
        checks.append(check_lq_adjoint_grid())
        checks.append(check_mp_fixed_point(LQOracle(T=1.0), seed=seed))
    if suite in ("all", "perturbation"):
        grid = UniformGrid(lo=(-5,), hi=(5,), shape=(2000,))
        x = grid.centers[:, 0]
        rho = (np.exp(-0.5 * x ** 2 / 0.25)
               / np.sqrt(2 * np.pi * 0.25)).reshape(grid.shape)
        u_star = lambda p, t: -np.atleast_2d(p)
        w = lambda p, t: np.ones_like(np.atleast_2d(p))
        checks.append(check_perturbation_order(
            u_star, w, tau=0.5, eps_list=(0.08, 0.04, 0.02, 0.01),
            grid=grid, rho0=rho, T=1.0))
        checks.append(check_needle_prehistory(u_star, w, tau=0.5, eps=0.1,
                                              grid=grid, rho0=rho, t_probe=0.3))
    if suite in ("all", "hjb"):
        sampler = Gaussian(mean=np.zeros(2), var=1.0)
        for t in (0.0, 0.5):
            checks.append(check_hjb_residual(LQOracle(T=1.0), sampler, t=t,
                                             T=1.0, seed=seed))
    if suite in ("all", "initial-deriv"):
        checks.append(check_initial_derivative_lq())
        grid = UniformGrid(lo=(-5,), hi=(5,), shape=(10_000,))
        x = grid.centers[:, 0]
        rho = (np.exp(-0.5 * (x - 0.5) ** 2 / 0.5)
               / np.sqrt(2 * np.pi * 0.5)).reshape(grid.shape)
        u = lambda p, t: -0.5 * np.atleast_2d(p) + 0.2 * np.sin(2.0 * t)
        g = lambda p: -0.5 * np.sum(np.atleast_2d(p) ** 2, axis=1)
        checks.append(check_initial_derivative_grid(u, g, grid, rho, T=1.0,
                                                    seed=seed))
    return checks


def _cmd_verify(args) -> int:
    t0 = time.perf_counter()
    checks = _verify_checks(args.suite, args.seed)
    passed = all(c.passed for c in checks)
    report = {
        "suite": args.suite,
        "passed": passed,
        "checks": [c.to_dict() for c in checks],
        "failed": [c.name for c in checks if not c.passed],
        "wall_time_seconds": time.perf_counter() - t0,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        write_json_atomic(args.out, report)
    return EXIT_OK if passed else EXIT_VERIFY


def _cmd_plot(args) -> int:
    run_dir = args.run
    csv_path = os.path.join(run_dir, "trajectory.csv")
    manifest_path = os.path.join(run_dir, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        times, frames = read_trajectory_csv(csv_path)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = manifest["config"]
    expected = [float(t) for t in cfg["checkpoints"]]
    missing = [t for t in expected if t not in times]
    if missing:
        print(f"error: checkpoints missing from the CSV: {missing}",
              file=sys.stderr)
        return EXIT_CONFIG
    pairs = None
    if args.pairs is not None:
        pairs = []
        for item in args.pairs:
            try:
                a, b = (int(v) for v in item.split(","))
            except ValueError:
                print(f"error: bad pair {item!r}, expected A,B", file=sys.stderr)
                return EXIT_CONFIG
            pairs.append((a, b))
    obstacle = None
    if cfg.get("obstacle"):
        shape = cfg["obstacle"].get("shape")
        obstacle = Cylinder(radius=float(cfg["obstacle"].get("radius", 0.5))) \
            if shape == "cylinder" else DoubleWedge()
    out_dir = args.out or run_dir
    try:
        written = export_plots(frames, int(cfg["d"]), out_dir, pairs=pairs,
                               obstacle=obstacle, title=cfg.get("preset", "run"))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"plots": written}))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "verify":
        return _cmd_verify(args)
    return _cmd_plot(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
