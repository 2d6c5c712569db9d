"""Particle transport under a control field.

The density is carried by N weighted samples; integrating the per-agent ODE
``dx/dt = u(x, t)`` with classical RK4 is the sample-level counterpart of the
continuity equation, and weights are never touched (mass conservation).

``rollout_with_param_grad`` replays the same RK4 arithmetic on a tape so a
trajectory loss can be differentiated with respect to the field parameters
(discretize-then-differentiate: the gradient is exact for the discrete loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .fields import FieldNet


class RolloutBlowupError(FloatingPointError):
    """Non-finite particle state during integration."""


class InvalidDensityError(ValueError):
    pass


class UnsupportedFieldError(TypeError):
    pass


@dataclass(frozen=True)
class ParticleEnsemble:
    """N weighted samples standing in for the density at one time."""

    points: np.ndarray        # (N, d)
    weights: np.ndarray       # (N,), nonnegative, sums to 1
    time: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidDensityError("points must be a nonempty (N, d) array")
        if not np.all(np.isfinite(pts)):
            raise InvalidDensityError("ensemble contains non-finite points")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],) or np.any(w < 0):
            raise InvalidDensityError("weights must be nonnegative, one per point")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidDensityError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points: np.ndarray, time: float = 0.0) -> "ParticleEnsemble":
        n = np.asarray(points).shape[0]
        return cls(points=np.asarray(points, dtype=np.float64),
                   weights=np.full(n, 1.0 / n), time=time)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class Trajectory:
    """States at every RK4 step plus the labeled checkpoint times."""

    times: np.ndarray         # (n_steps + 1,)
    states: np.ndarray        # (n_steps + 1, N, d)
    weights: np.ndarray       # (N,)
    checkpoints: tuple        # subset of times
    dt: float
    scheme: str = "rk4"

    def frame_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 + 1e-9 * abs(t):
            raise KeyError(f"time {t} is not on the integration grid")
        return idx

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def ensemble_at(self, t: float) -> ParticleEnsemble:
        idx = self.frame_index(t)
        return ParticleEnsemble(points=self.states[idx], weights=self.weights,
                                time=float(self.times[idx]))

    def checkpoint_ensembles(self) -> list[ParticleEnsemble]:
        return [self.ensemble_at(t) for t in self.checkpoints]


# -- initial densities --------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    """Isotropic Gaussian: mean vector, scalar variance (covariance var * I)."""

    mean: np.ndarray
    var: float

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if self.var <= 0 or not np.isfinite(self.var):
            raise InvalidDensityError("Gaussian variance must be positive")
        if not np.all(np.isfinite(m)):
            raise InvalidDensityError("Gaussian mean must be finite")
        object.__setattr__(self, "mean", m)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        d = self.dim
        q = np.sum((x - self.mean) ** 2, axis=1) / self.var
        return np.exp(-0.5 * q) / (2.0 * np.pi * self.var) ** (d / 2.0)


@dataclass(frozen=True)
class TruncExpGaussian:
    """Product density: flipped unit exponential in x_1 on (-inf, -1/2],
    Gaussian in the remaining coordinates with mean (0.5, 0, ..., 0) and
    variance 0.25."""

    dim: int

    def __post_init__(self):
        if self.dim < 2:
            raise InvalidDensityError("TruncExpGaussian needs dim >= 2")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x = np.empty((n, self.dim))
        x[:, 0] = -0.5 - rng.exponential(1.0, size=n)
        tail_mean = np.zeros(self.dim - 1)
        tail_mean[0] = 0.5
        x[:, 1:] = tail_mean + 0.5 * rng.standard_normal((n, self.dim - 1))
        return x


InitialDensity = Gaussian | TruncExpGaussian


def sample_initial(density: InitialDensity, n: int, seed: int) -> ParticleEnsemble:
    """Draw N i.i.d. samples; identical seed gives identical points."""
    if n < 1:
        raise InvalidDensityError("need at least one particle")
    rng = np.random.default_rng(seed)
    return ParticleEnsemble.uniform(density.sample(n, rng), time=0.0)


# -- analytic benchmark field ---------------------------------------------------


@dataclass(frozen=True)
class AnalyticLQControl:
    """Closed-form radial field ``u(x, t) = rate * x / (t - T - 1)``.

    ``rate=1`` is the optimal field of the linear-quadratic benchmark;
    ``rate=1/2`` is the half-rate transport field used by the
    initial-perturbation example.  The flow scales coordinates by
    ``((T + 1 - t) / (T + 1)) ** rate``.
    """

    T: float
    rate: float = 1.0

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tt = np.asarray(t, dtype=np.float64)
        denom = (tt - self.T - 1.0)
        if np.ndim(denom) == 0:
            return self.rate * x / denom
        return self.rate * x / denom[:, None]

    def coordinate_scale(self, t: float) -> float:
        return ((self.T + 1.0 - t) / (self.T + 1.0)) ** self.rate


@dataclass(frozen=True)
class ScaledGaussian:
    """Gaussian parameters after pushing through an analytic LQ flow."""

    mean: np.ndarray
    var: float
    coordinate_scale: float


def pushforward_density_check(initial: Gaussian, u, t: float) -> ScaledGaussian:
    """Exact pushforward of a Gaussian under an analytic LQ field.

    Returns the scaled mean/variance and the coordinate contraction factor
    ``((T + 1 - t) / (T + 1)) ** rate`` for comparison against an empirical
    ensemble.  Only :class:`AnalyticLQControl` fields are supported.
    """
    if not isinstance(u, AnalyticLQControl):
        raise UnsupportedFieldError("pushforward check requires the analytic LQ field")
    if not isinstance(initial, Gaussian):
        raise UnsupportedFieldError("pushforward check requires a Gaussian initial")
    s = u.coordinate_scale(t)
    return ScaledGaussian(mean=initial.mean * s, var=initial.var * s * s,
                          coordinate_scale=s)


# -- integration ----------------------------------------------------------------


def _grid(T: float, dt: float) -> np.ndarray:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide the horizon T={T}")
    return np.linspace(0.0, T, n + 1)


def _check_checkpoints(times: np.ndarray, checkpoints: Sequence[float], dt: float):
    cps = tuple(float(c) for c in checkpoints)
    if list(cps) != sorted(set(cps)):
        raise ValueError("checkpoint times must be strictly increasing")
    gaps = np.diff(cps)
    if len(gaps) and dt > gaps.min() + 1e-12:
        raise ValueError("dt must not exceed the smallest checkpoint gap")
    for c in cps:
        if np.min(np.abs(times - c)) > 1e-9:
            raise ValueError(f"checkpoint {c} does not lie on the dt grid")
    return cps


def rollout(ens0: ParticleEnsemble, u: Callable[[np.ndarray, float], np.ndarray],
            T: float, dt: float, checkpoints: Sequence[float] | None = None) -> Trajectory:
    """Classical RK4 per particle from t=0 to t=T; weights are untouched."""
    times = _grid(T, dt)
    cps = _check_checkpoints(times, checkpoints if checkpoints is not None
                             else (0.0, T), dt)
    n_steps = len(times) - 1
    states = np.empty((n_steps + 1, ens0.n, ens0.dim))
    x = ens0.points.copy()
    states[0] = x
    for j in range(n_steps):
        t = times[j]
        k1 = u(x, t)
        k2 = u(x + k1 * (dt / 2.0), t + dt / 2.0)
        k3 = u(x + k2 * (dt / 2.0), t + dt / 2.0)
        k4 = u(x + k3 * dt, t + dt)
        x = x + ((k1 + (k2 + k3) * 2.0) + k4) * (dt / 6.0)
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            raise RolloutBlowupError(
                f"particle {bad} became non-finite at t={times[j + 1]:.6g}")
        states[j + 1] = x
    return Trajectory(times=times, states=states, weights=ens0.weights.copy(),
                      checkpoints=cps, dt=dt)


class PathLoss(Protocol):
    """Time-discretized trajectory loss fed to ``rollout_with_param_grad``.

    ``running`` is called at every grid time with the trapezoid weight ``w``;
    return a scalar Var contribution (already weighted) or None to skip.
    ``u_of(points, t)`` evaluates the candidate field on the tape.
    """

    def running(self, tb: Tape, j: int, n_steps: int, t: float, w: float,
                x: Var, u_of) -> Var | None: ...

    def terminal(self, tb: Tape, x_final: Var) -> Var | None: ...


def rollout_with_param_grad(ens0: ParticleEnsemble, net: FieldNet,
                            params: np.ndarray, T: float, dt: float,
                            loss: PathLoss,
                            checkpoints: Sequence[float] | None = None):
    """Tape-recorded RK4 rollout: returns (trajectory, loss value, d loss/d params).

    The arithmetic mirrors :func:`rollout` exactly, so the trajectory states
    are bit-identical to an undifferentiated rollout of the same snapshot.
    """
    times = _grid(T, dt)
    cps = _check_checkpoints(times, checkpoints if checkpoints is not None
                             else (0.0, T), dt)
    n_steps = len(times) - 1
    tb = Tape()
    p = tb.leaf(params)

    def u_of(pts, t):
        return net.eval_tape(tb, p, pts, t)

    states = np.empty((n_steps + 1, ens0.n, ens0.dim))
    x = tb.leaf(ens0.points)
    states[0] = x.value
    contributions = []

    def weight(j):
        return dt * (0.5 if j in (0, n_steps) else 1.0)

    c0 = loss.running(tb, 0, n_steps, 0.0, weight(0), x, u_of)
    if c0 is not None:
        contributions.append(c0)
    for j in range(n_steps):
        t = times[j]
        k1 = u_of(x, t)
        k2 = u_of(ad.add(x, ad.mul(k1, dt / 2.0)), t + dt / 2.0)
        k3 = u_of(ad.add(x, ad.mul(k2, dt / 2.0)), t + dt / 2.0)
        k4 = u_of(ad.add(x, ad.mul(k3, dt)), t + dt)
        incr = ad.add(ad.add(k1, ad.mul(ad.add(k2, k3), 2.0)), k4)
        x = ad.add(x, ad.mul(incr, dt / 6.0))
        if not np.all(np.isfinite(x.value)):
            bad = int(np.flatnonzero(~np.isfinite(x.value).all(axis=1))[0])
            raise RolloutBlowupError(
                f"particle {bad} became non-finite at t={times[j + 1]:.6g}")
        states[j + 1] = x.value
        c = loss.running(tb, j + 1, n_steps, times[j + 1], weight(j + 1), x, u_of)
        if c is not None:
            contributions.append(c)
    c_term = loss.terminal(tb, x)
    if c_term is not None:
        contributions.append(c_term)

    if not contributions:
        total_value, grad = 0.0, np.zeros_like(np.asarray(params, dtype=np.float64))
    else:
        total = contributions[0]
        for c in contributions[1:]:
            total = ad.add(total, c)
        tb.backward(total)
        total_value, grad = float(total.value), tb.grad(p)

    traj = Trajectory(times=times, states=states, weights=ens0.weights.copy(),
                      checkpoints=cps, dt=dt)
    return traj, total_value, grad
