"""Run artifacts: the manifest JSON and the trajectory CSV."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile

import numpy as np

from .dynamics import Trajectory


def content_hash(config: dict) -> str:
    """Stable digest of a resolved configuration tree."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_json_atomic(path: str, payload: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_manifest(config: dict, records: list[dict], status: str,
                   artifacts: dict, wall_time: float) -> dict:
    return {
        "config": config,
        "content_hash": content_hash(config),
        "status": status,
        "iterations": records,
        "artifacts": artifacts,
        "wall_time_seconds": wall_time,
    }


def write_trajectory_csv(path: str, traj: Trajectory) -> int:
    """Checkpoint states, one row per (checkpoint, particle).

    Header is ``t,particle_id,x_0,...,x_{d-1}``; the row count is
    N * number of checkpoints.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    d = traj.states.shape[2]
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "particle_id"] + [f"x_{c}" for c in range(d)])
        for t in traj.checkpoints:
            ens = traj.ensemble_at(t)
            for i in range(ens.n):
                writer.writerow([repr(float(t)), i]
                                + [repr(float(v)) for v in ens.points[i]])
                rows += 1
    return rows


def read_trajectory_csv(path: str):
    """Returns (checkpoint_times, {t: points array})."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["t", "particle_id"]:
            raise ValueError(f"unexpected CSV header in {path}: {header}")
        d = len(header) - 2
        frames: dict[float, list] = {}
        for row in reader:
            t = float(row[0])
            frames.setdefault(t, []).append([float(v) for v in row[2:2 + d]])
    times = sorted(frames)
    return times, {t: np.asarray(frames[t]) for t in times}
