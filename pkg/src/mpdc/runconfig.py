"""Declarative run configuration: presets, strict validation, overrides.

A run is described by one JSON tree (preset name plus any overrides).  The
presets encode the paper-scale experiments at desk-scale budgets; unknown
keys are rejected with their full path so typos fail fast.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields as dc_fields
from typing import Any

import numpy as np

from .dynamics import Gaussian, TruncExpGaussian
from .rewards import (
    ControlEnergy,
    Cylinder,
    DoubleWedge,
    ObstaclePenalty,
    PairRepulsion,
    QuadraticTerminal,
    RewardSpec,
)
from .solver import ControlProblem, SolverConfig

ENV_SEED = "MPDC_SEED"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


def _solver_dict(**kw) -> dict:
    base = {f.name: getattr(SolverConfig(), f.name) for f in dc_fields(SolverConfig)}
    base.update(kw)
    return base


_COMMON_SOLVER = dict(
    adjoint_backend="characteristics",
    dt=0.025,
    adjoint_dt=0.025,
    control_steps=60,
    control_lr=1e-2,
    control_lr_decay=0.93,
    control_lr_floor=1e-3,
    control_width=32,
    train_batch=1024,
)


def _preset_lq() -> dict:
    return {
        "preset": "lq",
        "d": 2,
        "n_particles": 4096,
        "T": 1.0,
        "control_coeff": 0.5,
        "gamma": 0.0,
        "kernel_const": 0.1,
        "obstacle": None,
        "terminal": {"center": [0.0, 0.0], "weight": 0.5},
        "initial": {"kind": "gaussian", "mean": [0.0, 0.0], "var": 1.0},
        "checkpoints": [0.0, 0.25, 0.5, 0.75, 1.0],
        "seed": 0,
        "out_dir": "runs/lq",
        "solver": _solver_dict(max_iters=50, tol=1e-3, n_particles=4096,
                               **{**_COMMON_SOLVER, "adjoint_dt": 0.02}),
    }


def _preset_test1() -> dict:
    d = 8
    solver = dict(_COMMON_SOLVER)
    solver.update(control_lr=2e-2, control_lr_decay=0.95, control_lr_floor=3e-3)
    return {
        "preset": "test1",
        "d": d,
        "n_particles": 512,
        "T": 1.0,
        "control_coeff": 0.5,
        "gamma": 5.0,
        "kernel_const": 0.1,
        "obstacle": None,
        "terminal": {"center": [0.0] * d, "weight": 0.5},
        "initial": {"kind": "gaussian", "mean": [-2.0] * d, "var": 0.5},
        "checkpoints": [0.0, 0.25, 0.5, 0.75, 1.0],
        "seed": 0,
        "out_dir": "runs/test1",
        "solver": _solver_dict(max_iters=12, tol=1e-6, n_particles=512,
                               source_cloud_max=256, **solver),
    }


def _preset_test2(d: int = 30, n: int = 1024, iters: int = 40) -> dict:
    center = [0.0] * d
    center[0], center[1] = 1.0, -0.5
    solver = dict(_COMMON_SOLVER)
    solver.update(control_width=48, control_steps=100, control_lr=2e-2,
                  control_lr_decay=0.975, control_lr_floor=5e-3,
                  train_batch=1536)
    return {
        "preset": "test2" if d == 30 else "test2_d100",
        "d": d,
        "n_particles": n,
        "T": 1.0,
        "control_coeff": 0.5,
        "gamma": 0.0,
        "kernel_const": 0.1,
        "obstacle": {"shape": "cylinder", "eps": 0.1, "radius": 0.5},
        "terminal": {"center": center, "weight": 1.0},
        "initial": {"kind": "trunc_exp_gaussian"},
        "checkpoints": [0.0, 0.25, 0.5, 0.75, 1.0],
        "seed": 0,
        "out_dir": "runs/test2" if d == 30 else "runs/test2_d100",
        "solver": _solver_dict(max_iters=iters, tol=1e-6, n_particles=n,
                               **solver),
    }


def _preset_test3() -> dict:
    d = 30
    center = [0.0] * d
    center[0] = 2.0
    solver = dict(_COMMON_SOLVER)
    solver.update(control_width=48, control_steps=100, control_lr=2e-2,
                  control_lr_decay=0.975, control_lr_floor=5e-3)
    return {
        "preset": "test3",
        "d": d,
        "n_particles": 1024,
        "T": 1.0,
        "control_coeff": 0.5,
        "gamma": 1.0,
        "kernel_const": 0.1,
        "obstacle": {"shape": "double_wedge", "eps": 0.1, "radius": 0.5},
        "terminal": {"center": center, "weight": 1.0},
        "initial": {"kind": "gaussian",
                    "mean": [-2.0] + [0.0] * (d - 1), "var": 0.5},
        "checkpoints": [0.0, 0.25, 0.5, 0.75, 1.0],
        "seed": 0,
        "out_dir": "runs/test3",
        "solver": _solver_dict(max_iters=25, tol=1e-6, n_particles=1024,
                               source_cloud_max=256, **solver),
    }


PRESETS = {
    "lq": _preset_lq,
    "test1": _preset_test1,
    "test2": _preset_test2,
    "test2_d100": lambda: _preset_test2(d=100, n=256, iters=4),
    "test3": _preset_test3,
}


def preset_config(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON ({path}, line {exc.lineno}): "
                          f"{exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return merge_with_preset(raw)


def merge_with_preset(raw: dict) -> dict:
    base = preset_config(raw.get("preset", "custom")) \
        if raw.get("preset", "custom") != "custom" else _preset_lq() | {"preset": "custom"}
    cfg = copy.deepcopy(base)
    _merge(cfg, raw, path="")
    return cfg


def _merge(base: dict, override: dict, path: str) -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, here)
        else:
            base[key] = value


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply repeatable ``--set dotted.key=value`` pairs (value parsed as JSON)."""
    cfg = copy.deepcopy(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw_value = item.partition("=")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return cfg


@dataclass(frozen=True)
class RunSetup:
    config: dict
    problem: ControlProblem
    solver: SolverConfig
    out_dir: str


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def resolve(cfg: dict) -> RunSetup:
    """Validate the tree and build the problem and solver objects."""
    d = cfg["d"]
    _require(isinstance(d, int) and d >= 1, f"d must be a positive integer, got {d!r}")
    T = float(cfg["T"])
    _require(T > 0, "T must be positive")

    running: list = []
    coeff = float(cfg["control_coeff"])
    _require(coeff > 0, "control_coeff must be positive")
    running.append(ControlEnergy(coeff))
    gamma = float(cfg["gamma"])
    _require(gamma >= 0, "gamma must be nonnegative")
    if gamma > 0:
        running.append(PairRepulsion(gamma=gamma,
                                     kernel_const=float(cfg["kernel_const"])))
    obstacle = cfg["obstacle"]
    if obstacle is not None:
        shape_name = obstacle.get("shape")
        if shape_name == "cylinder":
            shape = Cylinder(radius=float(obstacle.get("radius", 0.5)))
        elif shape_name == "double_wedge":
            shape = DoubleWedge()
        else:
            raise ConfigError(f"obstacle.shape must be cylinder or double_wedge, "
                              f"got {shape_name!r}")
        running.append(ObstaclePenalty(shape, eps=float(obstacle.get("eps", 0.1))))

    term = cfg["terminal"]
    center = np.asarray(term["center"], dtype=np.float64)
    _require(center.shape == (d,), f"terminal.center must have length d={d}")
    terminal = QuadraticTerminal(center=center, weight=float(term["weight"]))

    init = cfg["initial"]
    kind = init.get("kind")
    if kind == "gaussian":
        mean = np.asarray(init["mean"], dtype=np.float64)
        _require(mean.shape == (d,), f"initial.mean must have length d={d}")
        initial = Gaussian(mean=mean, var=float(init["var"]))
    elif kind == "trunc_exp_gaussian":
        initial = TruncExpGaussian(dim=d)
    else:
        raise ConfigError(f"initial.kind must be gaussian or trunc_exp_gaussian, "
                          f"got {kind!r}")

    checkpoints = tuple(float(c) for c in cfg["checkpoints"])
    _require(list(checkpoints) == sorted(set(checkpoints)),
             "checkpoints must be strictly increasing")
    _require(checkpoints[0] == 0.0 and checkpoints[-1] == T,
             "checkpoints must start at 0 and end at T")

    seed = cfg["seed"]
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env_seed!r}") \
                from exc

    solver_kwargs = dict(cfg["solver"])
    known = {f.name for f in dc_fields(SolverConfig)}
    unknown = set(solver_kwargs) - known
    _require(not unknown, f"unknown solver keys: {sorted(unknown)}")
    solver_kwargs["n_particles"] = int(cfg["n_particles"])
    solver_kwargs["checkpoints"] = checkpoints
    solver_kwargs["seed"] = int(seed)
    try:
        solver = SolverConfig(**solver_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver config: {exc}") from exc

    problem = ControlProblem(rewards=RewardSpec(running=tuple(running),
                                                terminal=terminal),
                             initial=initial, T=T, dim=d)
    resolved = copy.deepcopy(cfg)
    resolved["seed"] = int(seed)
    return RunSetup(config=resolved, problem=problem, solver=solver,
                    out_dir=str(cfg["out_dir"]))
