"""Backward transport equation for the costate field.

The adjoint PDE is ``d_t phi + u . grad phi = -(dR/drho)`` with terminal value
``phi_T = g``.  Along a characteristic X(s) of u, ``phi(x, t) = g(X_T) +
integral_t^T (dR/drho)(X_s, s) ds``, which the characteristics backend
integrates directly (augmented RK4 state, one quadrature per query).  The
collocation backend trains a tanh trunk on the squared PDE residual at
sampled space-time points, with the terminal condition built into the
parameterization ``phi(x, t) = (1 - t/T) trunk(x, t) + (t/T) g(x)`` so it
holds for any trunk parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .dynamics import Gaussian, RolloutBlowupError
from .fields import FieldNet
from .optim import AdamState, adam_step
from .rewards import QuadraticTerminal


@dataclass
class CharacteristicsTable:
    """Flows and accumulated sources for the most recent query batch."""

    seeds: np.ndarray
    seed_times: np.ndarray
    endpoints: np.ndarray
    source_integrals: np.ndarray


class CharacteristicsAdjoint:
    """Exact-up-to-RK4 adjoint evaluator; queries integrate on demand."""

    backend = "characteristics"

    def __init__(self, u_eval, source, g, T: float, dt: float):
        self.u_eval = u_eval
        self.source = source
        self.g = g
        self.T = float(T)
        self.dt = float(dt)
        self.table: CharacteristicsTable | None = None

    def _integrate(self, x: np.ndarray, t: float):
        """Flow x forward from t to T and accumulate the source integral."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
        remaining = self.T - t
        if remaining < -1e-12:
            raise ValueError(f"query time {t} beyond the horizon {self.T}")
        n_steps = max(int(np.ceil(remaining / self.dt - 1e-9)), 0)
        acc = np.zeros(x.shape[0])
        if n_steps == 0:
            return x, acc
        h = remaining / n_steps
        s = t
        u = self.u_eval
        # sources built from the reward terms accept precomputed u values
        if hasattr(self.source, "with_u"):
            src = self.source.with_u
        else:
            src = lambda pts, tt, u_vals: self.source(pts, tt)
        for j in range(n_steps):
            k1 = u(x, s)
            q1 = src(x, s, k1)
            x2 = x + k1 * (h / 2.0)
            k2 = u(x2, s + h / 2.0)
            q2 = src(x2, s + h / 2.0, k2)
            x3 = x + k2 * (h / 2.0)
            k3 = u(x3, s + h / 2.0)
            q3 = src(x3, s + h / 2.0, k3)
            x4 = x + k3 * h
            k4 = u(x4, s + h)
            q4 = src(x4, s + h, k4)
            x = x + ((k1 + (k2 + k3) * 2.0) + k4) * (h / 6.0)
            acc = acc + ((q1 + (q2 + q3) * 2.0) + q4) * (h / 6.0)
            if not np.all(np.isfinite(x)):
                bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
                raise RolloutBlowupError(
                    f"characteristic from row {bad} blew up at s={s + h:.6g} "
                    f"(started at t={t:.6g})")
            s = t + (j + 1) * h
        return x, acc

    def phi(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        endpoints, acc = self._integrate(x, t)
        self.table = CharacteristicsTable(
            seeds=x.copy(), seed_times=np.full(x.shape[0], float(t)),
            endpoints=endpoints, source_integrals=acc)
        return self.g(endpoints) + acc

    def grad_phi(self, x: np.ndarray, t: float, h_rel: float = 1e-4) -> np.ndarray:
        """Central differences with per-coordinate re-solve of the flow."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = x.shape
        h = h_rel * np.maximum(1.0, np.abs(x))  # (n, d) per-coordinate steps
        probes = np.repeat(x[None, :, :], 2 * d, axis=0)  # (2d, n, d)
        for c in range(d):
            probes[2 * c, :, c] += h[:, c]
            probes[2 * c + 1, :, c] -= h[:, c]
        flat = probes.reshape(2 * d * n, d)
        endpoints, acc = self._integrate(flat, t)
        vals = (self.g(endpoints) + acc).reshape(2 * d, n)
        grad = np.empty((n, d))
        for c in range(d):
            grad[:, c] = (vals[2 * c] - vals[2 * c + 1]) / (2.0 * h[:, c])
        return grad


def solve_characteristics(u_eval, source, g, T: float, dt: float = 1e-3,
                          query_points: np.ndarray | None = None,
                          query_time: float = 0.0) -> CharacteristicsAdjoint:
    """Build the characteristics evaluator; optionally pre-solve some queries."""
    sol = CharacteristicsAdjoint(u_eval, source, g, T, dt)
    if query_points is not None:
        sol.phi(query_points, query_time)
    return sol


@dataclass
class AdjointFrameTable:
    """phi and grad phi at every trajectory frame (one backward sweep).

    Along a particle path of u the adjoint gradient obeys
    ``dv/dt = -(grad u)^T v - grad(dR/drho)`` with ``v(T) = grad g``, so a
    single reverse pass over the stored frames evaluates the whole table.
    """

    times: np.ndarray          # (F,)
    phis: np.ndarray           # (F, N)
    grads: np.ndarray          # (F, N, d)

    def frame(self, j: int):
        return self.phis[j], self.grads[j]


def sweep_adjoint_table(traj, jac_u_fn, u_eval, source, terminal_g,
                        terminal_grad_g) -> AdjointFrameTable:
    """Backward Heun sweep of (phi, grad phi) along stored particle paths.

    ``jac_u_fn(x, t)`` returns the control Jacobian (n, d_out, d);
    ``source`` must expose ``with_u`` and ``grad`` (see SnapshotSource).
    """
    states, times = traj.states, traj.times
    n_frames = states.shape[0]
    phis = np.empty((n_frames, states.shape[1]))
    grads = np.empty_like(states)
    phis[-1] = terminal_g(states[-1])
    grads[-1] = terminal_grad_g(states[-1])

    def rhs(j):
        x, t = states[j], float(times[j])
        u_vals = u_eval(x, t)
        jac = jac_u_fn(x, t)
        src, src_grad = source.value_and_grad(x, t, u_vals, jac)
        return jac, src, src_grad

    jac_hi, src_hi, sg_hi = rhs(n_frames - 1)
    for j in range(n_frames - 2, -1, -1):
        dt = float(times[j + 1] - times[j])
        v = grads[j + 1]
        f1 = -np.einsum("nod,no->nd", jac_hi, v) - sg_hi
        jac_lo, src_lo, sg_lo = rhs(j)
        v_pred = v - dt * f1
        f2 = -np.einsum("nod,no->nd", jac_lo, v_pred) - sg_lo
        grads[j] = v - (dt / 2.0) * (f1 + f2)
        phis[j] = phis[j + 1] + (dt / 2.0) * (src_hi + src_lo)
        jac_hi, src_hi, sg_hi = jac_lo, src_lo, sg_lo
    return AdjointFrameTable(times=times.copy(), phis=phis, grads=grads)


# -- collocation ---------------------------------------------------------------


@dataclass(frozen=True)
class CollocationConfig:
    width: int = 100
    batch: int = 2048
    steps: int = 3000
    lr: float = 2e-3
    weighting: str = "importance"     # or "reference"
    weight_clip: float = 10.0
    residual_threshold: float = 1e-2
    n_time_slots: int = 41


class CollocationAdjoint:
    """Trunk network with the terminal condition embedded structurally."""

    backend = "collocation"

    def __init__(self, net: FieldNet, params: np.ndarray,
                 terminal: QuadraticTerminal, T: float,
                 residual_rms: float = np.nan, warned: bool = False):
        self.net = net
        self.params = np.array(params, copy=True)
        self.terminal = terminal
        self.T = float(T)
        self.residual_rms = residual_rms
        self.warned = warned

    def phi(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tv = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        trunk = self.net.eval(self.params, x, tv)[:, 0]
        a = 1.0 - tv / self.T
        return a * trunk + (tv / self.T) * self.terminal.g(x)

    def grad_phi(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tv = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        _, grads = self.net.value_and_grad_full(self.params, x, tv)
        a = (1.0 - tv / self.T)[:, None]
        return a * grads[:, :self.net.dim] + \
            (tv / self.T)[:, None] * self.terminal.grad_g(x)

    def dphi_dt(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tv = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        vals, grads = self.net.value_and_grad_full(self.params, x, tv)
        a = 1.0 - tv / self.T
        return -vals / self.T + a * grads[:, self.net.dim] + \
            self.terminal.g(x) / self.T

    def tape_phi_grad_x(self, tb: Tape, x: Var, t: float) -> Var:
        """Spatial gradient of phi as a tape graph in the positions."""
        _, grad_full = self.net.tape_value_and_grad_full(tb, self.params, x, t)
        a = 1.0 - t / self.T
        trunk_part = ad.mul(ad.cols(grad_full, 0, self.net.dim), a)
        g_part = ad.mul(self.terminal.tape_grad_g(tb, x), t / self.T)
        return ad.add(trunk_part, g_part)


def pde_residual(solution, u_eval, source, x: np.ndarray, t) -> np.ndarray:
    """Adjoint PDE residual  d_t phi + u . grad phi + dR/drho  at points."""
    x = np.atleast_2d(x)
    u = u_eval(x, t)
    return (solution.dphi_dt(x, t)
            + np.sum(u * solution.grad_phi(x, t), axis=1)
            + source(x, t))


def solve_collocation(u_eval, source, terminal: QuadraticTerminal, T: float,
                      dim: int, reference: Gaussian,
                      config: CollocationConfig = CollocationConfig(),
                      seed: int = 0,
                      init_params: np.ndarray | None = None,
                      time_grid: np.ndarray | None = None) -> CollocationAdjoint:
    """Train the trunk on the squared PDE residual at sampled (t, x) points.

    Times are drawn from a uniform grid (so trajectory-backed sources hit
    stored frames exactly); spatial points come from the Gaussian reference
    density with importance weights 1/p_ref, clipped for variance control.
    """
    rng = np.random.default_rng(seed)
    net = FieldNet(dim=dim, out_dim=1, hidden=(config.width, config.width),
                   activation="tanh", residual=True, zero_init_output=True,
                   layer_cap=None)
    params = net.init_params(seed) if init_params is None else \
        np.array(init_params, copy=True)
    adam = AdamState.fresh(net.n_params, lr=config.lr)
    tgrid = np.linspace(0.0, T, config.n_time_slots) if time_grid is None \
        else np.asarray(time_grid, dtype=np.float64)

    def batch_arrays(batch_size):
        ti = rng.integers(0, len(tgrid), size=batch_size)
        x = reference.sample(batch_size, rng)
        tv = tgrid[ti]
        src = np.asarray(source(x, tv), dtype=np.float64)
        uv = u_eval(x, tv)
        if config.weighting == "importance":
            w = 1.0 / np.maximum(reference.pdf(x), 1e-300)
            w /= w.mean()
            w = np.minimum(w, config.weight_clip)
        else:
            w = np.ones(batch_size)
        return x, tv, src, uv, w

    def residual_var(tb, p, x, tv, src, uv):
        val, grad_full = net.tape_value_and_grad_full(tb, p, x, tv)
        tcol = tv[:, None]
        a = 1.0 - tcol / T
        g_vals = terminal.g(x)[:, None]
        phi_t = ad.add(ad.add(ad.mul(val, -1.0 / T),
                              ad.mul(ad.cols(grad_full, dim, dim + 1), a)),
                       g_vals / T)
        grad_x = ad.add(ad.mul(ad.cols(grad_full, 0, dim), a),
                        (tcol / T) * terminal.grad_g(x))
        transport = ad.vsum(ad.mul(grad_x, uv), axis=1, keepdims=True)
        return ad.add(ad.add(phi_t, transport), src[:, None])

    for _ in range(config.steps):
        x, tv, src, uv, w = batch_arrays(config.batch)
        tb = Tape()
        p = tb.leaf(params)
        res = residual_var(tb, p, x, tv, src, uv)
        loss = ad.vmean(ad.mul(ad.square(res), w[:, None]))
        tb.backward(loss)
        params = adam_step(adam, params, tb.grad(p))

    # held-out residual diagnostic
    x, tv, src, uv, w = batch_arrays(config.batch)
    tb = Tape()
    res = residual_var(tb, tb.leaf(params), x, tv, src, uv)
    rms = float(np.sqrt(np.mean(w * res.value[:, 0] ** 2)))
    return CollocationAdjoint(net, params, terminal, T, residual_rms=rms,
                              warned=rms > config.residual_threshold)


def pde_residual_fd(solution, u_eval, source, x: np.ndarray, t: float,
                    h: float = 1e-5) -> np.ndarray:
    """Residual with the time derivative taken by central differences.

    Works for backends without an analytic d_t phi (characteristics).
    """
    x = np.atleast_2d(x)
    lo, hi = max(t - h, 0.0), min(t + h, solution.T)
    dphi = (solution.phi(x, hi) - solution.phi(x, lo)) / (hi - lo)
    u = u_eval(x, t)
    return dphi + np.sum(u * solution.grad_phi(x, t), axis=1) + source(x, t)


def phi_grad(solution, x: np.ndarray, t: float) -> np.ndarray:
    """Spatial gradient of the adjoint, whatever the backend."""
    return solution.grad_phi(x, t)
