"""Composable running and terminal rewards with closed-form density derivatives.

Running terms (all penalties, hence <= 0):

* control energy      -coeff * integral |u|^2 rho dx
* pair repulsion      -gamma * double integral rho(y) rho(x) / a(x, y), with
                      the symmetric kernel a(x, y) = c + |y - x|^2
* obstacle penalty    -integral rho(x) / (eps + b(x)) dx

The terminal reward is linear, G(q) = integral g(x) q(x) dx, so its density
derivative is the point cost g itself.

Because a(x, y) is symmetric, the density derivative of the double integral
carries a factor 2: delta/delta rho = -2 gamma * integral rho(y) / a(x, y) dy.
Derivative/value consistency under ensemble reweighting is enforced by tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .dynamics import ParticleEnsemble, Trajectory


class EmptyEnsembleError(ValueError):
    pass


# -- obstacle shapes ------------------------------------------------------------


@dataclass(frozen=True)
class Cylinder:
    """Radius-r cylinder about the x1-x2 axis line: b = max(0, x1^2+x2^2-r^2)."""

    radius: float = 0.5

    def b(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.maximum(x[:, 0] ** 2 + x[:, 1] ** 2 - self.radius ** 2, 0.0)

    def grad_b(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros_like(x)
        active = x[:, 0] ** 2 + x[:, 1] ** 2 > self.radius ** 2
        out[active, 0] = 2.0 * x[active, 0]
        out[active, 1] = 2.0 * x[active, 1]
        return out

    def tape_b(self, tb: Tape, x: Var) -> Var:
        r2 = ad.vsum(ad.square(ad.cols(x, 0, 2)), axis=1)
        return ad.relu(ad.sub(r2, self.radius ** 2))


@dataclass(frozen=True)
class DoubleWedge:
    """Two squeezing wedges: b = 50 * max(0, 5 x1^2 - x2^2 - 0.1).

    The negative band of the unclamped form is cut off at zero so the
    obstacle penalty stays bounded by 1/eps.
    """

    scale: float = 50.0
    slope: float = 5.0
    gap: float = 0.1

    def b(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        s = self.slope * x[:, 0] ** 2 - x[:, 1] ** 2 - self.gap
        return self.scale * np.maximum(s, 0.0)

    def grad_b(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros_like(x)
        active = self.slope * x[:, 0] ** 2 - x[:, 1] ** 2 > self.gap
        out[active, 0] = self.scale * 2.0 * self.slope * x[active, 0]
        out[active, 1] = -self.scale * 2.0 * x[active, 1]
        return out

    def tape_b(self, tb: Tape, x: Var) -> Var:
        x1 = ad.cols(x, 0, 1)
        x2 = ad.cols(x, 1, 2)
        s = ad.sub(ad.sub(ad.mul(ad.square(x1), self.slope), ad.square(x2)), self.gap)
        return ad.mul(ad.vsum(ad.relu(s), axis=1), self.scale)


# -- running terms ---------------------------------------------------------------


@dataclass(frozen=True)
class ControlEnergy:
    coeff: float = 0.5

    def per_particle(self, points, u_vals):
        return -self.coeff * np.sum(u_vals ** 2, axis=1)

    def deriv(self, u_vals_q):
        return -self.coeff * np.sum(u_vals_q ** 2, axis=1)

    def deriv_grad_x(self, u_vals, jac_u):
        # d/dx of -coeff |u(x)|^2 with jac_u = du/dx of shape (n, out, d)
        return -2.0 * self.coeff * np.einsum("nod,no->nd", jac_u, u_vals)

    def tape_mean(self, tb: Tape, x: Var, u: Var) -> Var:
        return ad.mul(ad.vmean(ad.vsum(ad.square(u), axis=1)), -self.coeff)


@dataclass(frozen=True)
class PairRepulsion:
    """Kernel a(x, y) = kernel_const + |y - x|^2; value -gamma E[1/a]."""

    gamma: float
    kernel_const: float = 0.1

    def __post_init__(self):
        if self.kernel_const <= 0:
            raise ValueError("interaction kernel constant must be positive")

    def kernel(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.kernel_const + np.sum((y - x) ** 2, axis=-1)

    def value_exact(self, points: np.ndarray, weights: np.ndarray) -> float:
        """Weighted mean of 1/a over distinct pairs (the brute-force oracle)."""
        n = points.shape[0]
        if n < 2:
            raise EmptyEnsembleError("need at least two particles for interaction")
        total = 0.0
        for i in range(n):
            a = self.kernel(points[i], points)
            contrib = weights[i] * weights / a
            total += contrib.sum() - contrib[i]
        pair_mass = 1.0 - float(np.sum(weights ** 2))
        return -self.gamma * float(total) / pair_mass

    def pairs_from(self, n: int, rng: np.random.Generator):
        perm = rng.permutation(n)
        half = n // 2
        return perm[:half], perm[half:2 * half]

    def per_particle_paired(self, points: np.ndarray, ia: np.ndarray,
                            ib: np.ndarray) -> np.ndarray:
        """Per-particle values from disjoint random pairs; mean is the estimate."""
        vals = np.zeros(points.shape[0])
        pair = -self.gamma / self.kernel(points[ia], points[ib])
        vals[ia] = pair
        vals[ib] = pair
        counts = np.zeros(points.shape[0])
        counts[ia] = 1.0
        counts[ib] = 1.0
        used = counts.sum()
        # unused (odd-one-out) rows carry the mean so the total is unbiased
        if used < points.shape[0]:
            vals[counts == 0.0] = pair.mean()
        return vals

    def deriv(self, queries: np.ndarray, cloud: np.ndarray,
              weights: np.ndarray) -> np.ndarray:
        """-2 gamma * weighted mean of 1/a(x, y) over the cloud, leave-one-out."""
        out = np.empty(queries.shape[0])
        chunk = max(1, int(4e6 // max(cloud.shape[0], 1)))
        for s in range(0, queries.shape[0], chunk):
            q = queries[s:s + chunk]
            a = self.kernel_const + np.sum(
                (cloud[None, :, :] - q[:, None, :]) ** 2, axis=2)
            num = (weights[None, :] / a).sum(axis=1)
            den = np.ones(q.shape[0])
            self_mask = a <= self.kernel_const  # distance zero: the point itself
            if np.any(self_mask):
                w_self = (weights[None, :] * self_mask).sum(axis=1)
                num -= w_self / self.kernel_const
                den -= w_self
            out[s:s + chunk] = -2.0 * self.gamma * num / np.maximum(den, 1e-300)
        return out

    def deriv_grad_x(self, queries: np.ndarray, cloud: np.ndarray,
                     weights: np.ndarray) -> np.ndarray:
        """Spatial gradient of ``deriv``: 4 gamma * mean of (x - y)/a^2."""
        return self.deriv_and_grad(queries, cloud, weights)[1]

    def deriv_and_grad(self, queries: np.ndarray, cloud: np.ndarray,
                       weights: np.ndarray):
        """Leave-one-out derivative and its spatial gradient in one pass."""
        n = queries.shape[0]
        vals = np.empty(n)
        grads = np.empty_like(queries)
        chunk = max(1, int(2e6 // max(cloud.shape[0], 1)))
        for s in range(0, n, chunk):
            q = queries[s:s + chunk]
            diff = q[:, None, :] - cloud[None, :, :]
            a = self.kernel_const + np.einsum("nmd,nmd->nm", diff, diff)
            inv = weights[None, :] / a
            num = inv.sum(axis=1)
            den = np.ones(q.shape[0])
            self_mask = a <= self.kernel_const
            if np.any(self_mask):
                w_self = (weights[None, :] * self_mask).sum(axis=1)
                num -= w_self / self.kernel_const
                den -= w_self
            vals[s:s + chunk] = -2.0 * self.gamma * num / np.maximum(den, 1e-300)
            coef = (inv / a)[:, None, :]            # w / a^2, shape (q, 1, m)
            grads[s:s + chunk] = 4.0 * self.gamma * (coef @ diff)[:, 0, :]
        return vals, grads

    def tape_mean(self, tb: Tape, x: Var, u: Var) -> Var:
        """Half-split pairing; rows are assumed already randomly ordered."""
        n = x.value.shape[0]
        half = n // 2
        if half == 0:
            raise EmptyEnsembleError("need at least two particles for interaction")
        diff = ad.sub(ad.rows(x, 0, half), ad.rows(x, half, 2 * half))
        a = ad.add(ad.vsum(ad.square(diff), axis=1), self.kernel_const)
        return ad.mul(ad.vmean(ad.reciprocal(a)), -self.gamma)


@dataclass(frozen=True)
class ObstaclePenalty:
    shape: Cylinder | DoubleWedge
    eps: float = 0.1

    def per_particle(self, points):
        return -1.0 / (self.eps + self.shape.b(points))

    def deriv(self, queries):
        return -1.0 / (self.eps + self.shape.b(queries))

    def deriv_grad_x(self, queries):
        denom = (self.eps + self.shape.b(queries)) ** 2
        return self.shape.grad_b(queries) / denom[:, None]

    def tape_mean(self, tb: Tape, x: Var, u: Var) -> Var:
        b = self.shape.tape_b(tb, x)
        return ad.neg(ad.vmean(ad.reciprocal(ad.add(b, self.eps))))


RunningTerm = ControlEnergy | PairRepulsion | ObstaclePenalty


# -- terminal term ----------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticTerminal:
    """g(x) = -weight * |x - center|^2; G(q) = integral g dq, so dG/dq = g."""

    center: np.ndarray
    weight: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.atleast_1d(np.asarray(self.center, dtype=np.float64)))

    def g(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return -self.weight * np.sum((x - self.center) ** 2, axis=1)

    def grad_g(self, x: np.ndarray) -> np.ndarray:
        return -2.0 * self.weight * (np.atleast_2d(x) - self.center)

    def tape_g(self, tb: Tape, x: Var) -> Var:
        return ad.mul(ad.vsum(ad.square(ad.sub(x, self.center)), axis=1), -self.weight)

    def tape_grad_g(self, tb: Tape, x: Var) -> Var:
        return ad.mul(ad.sub(x, self.center), -2.0 * self.weight)


# -- assembled spec ----------------------------------------------------------------


@dataclass(frozen=True)
class RewardSpec:
    running: tuple[RunningTerm, ...]
    terminal: QuadraticTerminal

    def interaction(self) -> PairRepulsion | None:
        for term in self.running:
            if isinstance(term, PairRepulsion):
                return term
        return None


def running_per_particle(spec: RewardSpec, ens: ParticleEnsemble,
                         u_eval, t: float,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-particle running-reward samples; their weighted mean estimates R.

    Interaction uses disjoint random index pairs when ``rng`` is given
    (uniform weights only) and the exact double sum otherwise.
    """
    if ens.n < 1:
        raise EmptyEnsembleError("empty ensemble")
    vals = np.zeros(ens.n)
    u_vals = None
    for term in spec.running:
        if isinstance(term, ControlEnergy):
            if u_vals is None:
                u_vals = u_eval(ens.points, ens.time if t is None else t)
            vals += term.per_particle(ens.points, u_vals)
        elif isinstance(term, ObstaclePenalty):
            vals += term.per_particle(ens.points)
        elif isinstance(term, PairRepulsion):
            if rng is not None:
                if not np.allclose(ens.weights, 1.0 / ens.n):
                    raise ValueError("paired interaction estimate needs uniform weights")
                ia, ib = term.pairs_from(ens.n, rng)
                vals += term.per_particle_paired(ens.points, ia, ib)
            else:
                vals += term.value_exact(ens.points, ens.weights)
        else:  # pragma: no cover - spec covers exactly these variants
            raise TypeError(f"unknown running term {term!r}")
    return vals


def running_value(spec: RewardSpec, ens: ParticleEnsemble, u_eval, t: float,
                  rng: np.random.Generator | None = None) -> float:
    return float(np.sum(ens.weights * running_per_particle(spec, ens, u_eval, t, rng)))


def running_deriv(spec: RewardSpec, ens: ParticleEnsemble, u_eval, t: float,
                  queries: np.ndarray) -> np.ndarray:
    """delta R / delta rho at query points, against the ensemble's density."""
    if ens.n < 1:
        raise EmptyEnsembleError("empty ensemble")
    queries = np.atleast_2d(queries)
    out = np.zeros(queries.shape[0])
    for term in spec.running:
        if isinstance(term, ControlEnergy):
            out += term.deriv(u_eval(queries, t))
        elif isinstance(term, ObstaclePenalty):
            out += term.deriv(queries)
        elif isinstance(term, PairRepulsion):
            out += term.deriv(queries, ens.points, ens.weights)
    return out


def terminal_value(spec: RewardSpec, ens: ParticleEnsemble) -> float:
    if ens.n < 1:
        raise EmptyEnsembleError("empty ensemble")
    return float(np.sum(ens.weights * spec.terminal.g(ens.points)))


def terminal_deriv(spec: RewardSpec, queries: np.ndarray) -> np.ndarray:
    return spec.terminal.g(queries)


class SnapshotSource:
    """delta R / delta rho of a frozen (trajectory, control) pair.

    Callable as ``source(x, t)`` with a scalar time or one time per row; the
    density at time t is the nearest stored frame (piecewise constant between
    RK4 steps).  ``with_u`` skips the control evaluation when the caller has
    the field values already (characteristics integration computes them for
    the flow anyway).
    """

    def __init__(self, spec: RewardSpec, traj: Trajectory, u_eval,
                 cloud_max: int | None = None, seed: int = 0):
        self.spec = spec
        self.u_eval = u_eval
        self.dt = traj.dt
        states, weights = traj.states, traj.weights
        if spec.interaction() is not None and cloud_max is not None \
                and states.shape[1] > cloud_max:
            keep = np.random.default_rng(seed).choice(states.shape[1], cloud_max,
                                                      replace=False)
            states = states[:, keep, :]
            weights = np.full(cloud_max, 1.0 / cloud_max)
        self.states = states
        self.weights = weights

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        return self.with_u(x, t, None)

    def with_u(self, x: np.ndarray, t, u_vals: np.ndarray | None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tv = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        out = np.zeros(x.shape[0])
        for term in self.spec.running:
            if isinstance(term, ControlEnergy):
                if u_vals is None:
                    u_vals = self.u_eval(x, tv)
                out += term.deriv(u_vals)
            elif isinstance(term, ObstaclePenalty):
                out += term.deriv(x)
            elif isinstance(term, PairRepulsion):
                idx = np.clip(np.rint(tv / self.dt).astype(int), 0,
                              self.states.shape[0] - 1)
                for v in np.unique(idx):
                    m = idx == v
                    out[m] += term.deriv(x[m], self.states[v], self.weights)
        return out

    def grad(self, x: np.ndarray, t: float, u_vals: np.ndarray,
             jac_u: np.ndarray) -> np.ndarray:
        """Spatial gradient of the source at one time slice."""
        return self.value_and_grad(x, t, u_vals, jac_u)[1]

    def value_and_grad(self, x: np.ndarray, t: float, u_vals: np.ndarray,
                       jac_u: np.ndarray):
        """Source and its spatial gradient at one time slice, fused."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        vals = np.zeros(x.shape[0])
        grads = np.zeros_like(x)
        for term in self.spec.running:
            if isinstance(term, ControlEnergy):
                vals += term.deriv(u_vals)
                grads += term.deriv_grad_x(u_vals, jac_u)
            elif isinstance(term, ObstaclePenalty):
                vals += term.deriv(x)
                grads += term.deriv_grad_x(x)
            elif isinstance(term, PairRepulsion):
                idx = min(max(int(round(t / self.dt)), 0), self.states.shape[0] - 1)
                v, g = term.deriv_and_grad(x, self.states[idx], self.weights)
                vals += v
                grads += g
        return vals, grads


def running_deriv_field(spec: RewardSpec, traj: Trajectory, u_eval,
                        cloud_max: int | None = None,
                        seed: int = 0) -> SnapshotSource:
    return SnapshotSource(spec, traj, u_eval, cloud_max=cloud_max, seed=seed)
