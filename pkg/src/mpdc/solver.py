"""Alternating maximum-principle solver.

Each outer iteration k builds the adjoint for the previous pair
(rho^{k-1}, u^{k-1}), then runs a fixed budget of Adam steps on the
proximally regularized Hamiltonian objective

    - integral_0^T H(rho_t, phi^k_t, u_t) dt
    + 1/(2 eps_k) integral_0^T || u_t - u^k_t ||^2 dt,

with gradients obtained by reverse mode through the unrolled RK4 rollout
(the particles carry the density, so the continuity constraint holds by
construction).  The spatial norms integrate against the trajectory's
empirical measure.  Iteration stops when the control stops moving:
integral || u^{k+1} - u^k ||^2 dt < tol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adjoint import (
    AdjointFrameTable,
    CollocationAdjoint,
    CollocationConfig,
    solve_characteristics,
    solve_collocation,
    sweep_adjoint_table,
)
from .autodiff import Tape, Var
from .dynamics import (
    Gaussian,
    ParticleEnsemble,
    RolloutBlowupError,
    Trajectory,
    TruncExpGaussian,
    rollout,
    rollout_with_param_grad,
    sample_initial,
)
from .fields import FieldNet
from .optim import AdamState, NonFiniteGradientError, adam_step
from .rewards import (
    ControlEnergy,
    PairRepulsion,
    RewardSpec,
    running_deriv_field,
    running_per_particle,
    terminal_value,
)


class IterationAbortedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlProblem:
    rewards: RewardSpec
    initial: Gaussian | TruncExpGaussian
    T: float
    dim: int


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 30
    tol: float = 1e-3
    step_size: float = 0.25
    n_particles: int = 4096
    dt: float = 0.01                    # trajectory / evaluation grid
    checkpoints: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    # control network and its inner optimization
    control_width: int = 64
    control_activation: str = "softplus"
    control_steps: int = 20
    control_lr: float = 2e-2
    control_lr_decay: float = 1.0      # per-outer-iteration factor
    control_lr_floor: float = 1e-3
    train_batch: int = 1024
    train_dt: float = 0.025
    loss_time_stride: int = 4
    layer_cap: float = 10.0
    lipschitz_cap: float | None = None
    # adjoint backend
    adjoint_backend: str = "characteristics"
    adjoint_dt: float = 0.01
    colloc_width: int = 64
    colloc_batch: int = 1024
    colloc_steps: int = 400
    colloc_first_steps: int = 1500
    colloc_lr: float = 3e-3
    colloc_reference_var: float = 2.0
    source_cloud_max: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not (0.0 < self.step_size):
            raise ValueError("step size must be positive")
        if self.adjoint_backend not in ("characteristics", "collocation"):
            raise ValueError(f"unknown adjoint backend {self.adjoint_backend!r}")


@dataclass
class SolverState:
    net: FieldNet
    params: list[np.ndarray] = field(default_factory=list)   # snapshots u^0..u^k
    trajectory: Trajectory | None = None
    records: list[dict] = field(default_factory=list)        # per-iteration metrics
    status: str = "running"

    @property
    def reward_history(self) -> list[float]:
        return [r["reward"] for r in self.records]

    @property
    def delta_history(self) -> list[float]:
        return [r["delta"] for r in self.records if r["delta"] is not None]

    def control(self, k: int = -1) -> Callable[[np.ndarray, float], np.ndarray]:
        return self.net.evaluator(self.params[k])


def stepsize_bound(L_u: float, L_rho: float, L_G: float, M_rho: float,
                   M_U: float, d: int, T: float, c: float) -> float:
    """Largest admissible proximal step for the monotonicity guarantee."""
    vals = {"L_u": L_u, "L_rho": L_rho, "L_G": L_G, "M_rho": M_rho,
            "M_U": M_U, "d": d, "T": T, "c": c}
    for name, v in vals.items():
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return 2.0 / (L_u + (L_rho * T + L_G) * M_rho ** 2 * d * M_U + c)


def hamiltonian(spec: RewardSpec, ens: ParticleEnsemble, phi_sol,
                w_eval, t: float, rng: np.random.Generator | None = None) -> float:
    """Monte-Carlo estimate of  <rho, w . grad phi> + R(rho, w)  at time t."""
    if abs(ens.time - t) > 1e-9 + 1e-9 * abs(t):
        raise ValueError(f"ensemble is at time {ens.time}, asked for {t}")
    w_vals = w_eval(ens.points, t)
    gp = phi_sol.grad_phi(ens.points, t)
    coupling = float(np.sum(ens.weights * np.sum(w_vals * gp, axis=1)))
    running = float(np.sum(ens.weights *
                           running_per_particle(spec, ens, w_eval, t, rng)))
    return coupling + running


def convergence_metric(u_a, u_b, probes: Sequence[tuple]) -> float:
    """Quadrature of spatial mean-square control differences over probes.

    ``probes`` holds (t, points, quadrature_weight) triplets covering [0, T];
    the spatial integral uses the empirical measure of the points.
    """
    total = 0.0
    for t, pts, w in probes:
        d2 = np.sum((u_a(pts, t) - u_b(pts, t)) ** 2, axis=1)
        total += w * float(np.mean(d2))
    return total


def trajectory_probes(traj: Trajectory, max_times: int = 21) -> list[tuple]:
    """Trapezoid-weighted (t, points, weight) triplets from stored frames."""
    n = len(traj.times) - 1
    stride = max(1, n // max(max_times - 1, 1))
    idx = list(range(0, n + 1, stride))
    if idx[-1] != n:
        idx.append(n)
    times = traj.times[idx]
    probes = []
    for j, i in enumerate(idx):
        if j == 0:
            w = (times[1] - times[0]) / 2.0
        elif j == len(idx) - 1:
            w = (times[-1] - times[-2]) / 2.0
        else:
            w = (times[j + 1] - times[j - 1]) / 2.0
        probes.append((float(times[j]), traj.states[i], float(w)))
    return probes


def estimate_total_reward(problem: ControlProblem, u_eval, cfg: SolverConfig,
                          ens0: ParticleEnsemble, pair_seed: int):
    """Reward estimate, its standard error, and the evaluation trajectory.

    The per-particle pathwise totals (time quadrature of running samples plus
    the terminal cost) give the Monte-Carlo standard error.  Control-energy
    evaluations are batched over all frames in one network call.
    """
    spec = problem.rewards
    traj = rollout(ens0, u_eval, problem.T, cfg.dt, cfg.checkpoints)
    n = ens0.n
    times = traj.times
    n_frames = len(times)
    quad = np.full(n_frames, traj.dt)
    quad[0] = quad[-1] = traj.dt / 2.0
    per_frame = np.zeros((n_frames, n))
    flat = traj.states.reshape(n_frames * n, ens0.dim)
    rng = np.random.default_rng(pair_seed)
    for term in spec.running:
        if isinstance(term, ControlEnergy):
            u_all = u_eval(flat, np.repeat(times, n))
            per_frame += term.per_particle(flat, u_all).reshape(n_frames, n)
        elif isinstance(term, PairRepulsion):
            for j in range(n_frames):
                ia, ib = term.pairs_from(n, rng)
                per_frame[j] += term.per_particle_paired(traj.states[j], ia, ib)
        else:
            per_frame += term.per_particle(flat).reshape(n_frames, n)
    totals = quad @ per_frame
    totals += spec.terminal.g(traj.states[-1])
    reward = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / np.sqrt(n))
    return reward, se, traj


class _ProxMPLoss:
    """Inner objective: -H coupling - R + proximal tether, per grid time."""

    def __init__(self, spec: RewardSpec, phi_sol, net: FieldNet,
                 params_prev: np.ndarray, eps_k: float, stride: int,
                 offset: int, dt: float, tape_phi: bool):
        self.spec = spec
        self.phi_sol = phi_sol
        self.net = net
        self.params_prev = params_prev
        self.eps_k = eps_k
        self.stride = stride
        self.offset = offset
        self.dt = dt
        self.tape_phi = tape_phi

    def running(self, tb: Tape, j: int, n_steps: int, t: float, w: float,
                x: Var, u_of):
        if j == n_steps or (j - self.offset) % self.stride != 0:
            return None
        wj = self.dt * self.stride
        u = u_of(x, t)
        if self.tape_phi:
            gp = self.phi_sol.tape_phi_grad_x(tb, x, t)
        else:
            gp = self.phi_sol.grad_phi(x.value, t)
        coupling = ad.vmean(ad.vsum(ad.mul(u, gp), axis=1))
        total = ad.mul(coupling, -wj)
        for term in self.spec.running:
            total = ad.add(total, ad.mul(term.tape_mean(tb, x, u), -wj))
        u_old = self.net.eval_tape(tb, self.params_prev, x, t)
        prox = ad.vmean(ad.vsum(ad.square(ad.sub(u, u_old)), axis=1))
        return ad.add(total, ad.mul(prox, wj / (2.0 * self.eps_k)))

    def terminal(self, tb: Tape, x_final: Var):
        return None  # terminal reward reaches u only through the adjoint


def build_adjoint(problem: ControlProblem, traj_prev: Trajectory, u_prev_eval,
                  cfg: SolverConfig, seed: int,
                  warm_params: np.ndarray | None = None, first: bool = False,
                  source=None):
    """Adjoint of the previous iterate pair, on the configured backend."""
    spec = problem.rewards
    if source is None:
        source = running_deriv_field(spec, traj_prev, u_prev_eval,
                                     cloud_max=cfg.source_cloud_max, seed=seed)
    if cfg.adjoint_backend == "characteristics":
        return solve_characteristics(u_prev_eval, source, spec.terminal.g,
                                     problem.T, dt=cfg.adjoint_dt)
    mean0 = problem.initial.mean if isinstance(problem.initial, Gaussian) \
        else _trunc_exp_mean(problem.dim)
    center = 0.5 * (mean0 + spec.terminal.center)
    reference = Gaussian(mean=center, var=cfg.colloc_reference_var)
    colloc_cfg = CollocationConfig(width=cfg.colloc_width, batch=cfg.colloc_batch,
                                   steps=cfg.colloc_first_steps if first
                                   else cfg.colloc_steps, lr=cfg.colloc_lr)
    return solve_collocation(u_prev_eval, source, spec.terminal, problem.T,
                             problem.dim, reference, colloc_cfg, seed=seed,
                             init_params=warm_params, time_grid=traj_prev.times)


def _trunc_exp_mean(dim: int) -> np.ndarray:
    mean = np.zeros(dim)
    mean[0] = -1.5  # -1/2 minus the unit-exponential mean
    mean[1] = 0.5
    return mean


def _rollout_inner_steps(problem, net, params_prev, ens0, phi_sol, cfg, rng, lr):
    """Moving-cloud inner loop: gradients via the differentiated rollout."""
    spec = problem.rewards
    n_steps = int(round(problem.T / cfg.train_dt))
    stride = min(max(cfg.loss_time_stride, 1), n_steps)
    params = np.array(params_prev, copy=True)
    adam = AdamState.fresh(net.n_params, lr=lr)
    for _ in range(cfg.control_steps):
        idx = rng.choice(ens0.n, min(cfg.train_batch, ens0.n), replace=False)
        batch = ParticleEnsemble.uniform(ens0.points[idx])
        offset = int(rng.integers(stride))
        loss = _ProxMPLoss(spec, phi_sol, net, params_prev, cfg.step_size,
                           stride, offset, cfg.train_dt,
                           tape_phi=isinstance(phi_sol, CollocationAdjoint))
        _, value, grad = rollout_with_param_grad(
            batch, net, params, problem.T, cfg.train_dt, loss)
        if not np.isfinite(value):
            raise NonFiniteGradientError(f"inner loss became {value!r}")
        params = adam_step(adam, params, grad)
        params = net.project_caps(params)
    return params


def _frozen_cloud_inner_steps(problem, net, params_prev, traj_prev, table,
                              cfg, rng, lr, adam=None):
    """Fixed-density inner loop: regress on the previous trajectory's frames.

    Maximizes the time quadrature of H(rho^{k-1}_t, phi^k_t, u_t) minus the
    proximal tether, with exact adjoint gradients from the frame table.
    Only the control-dependent reward terms enter (the others are constant
    in the control at fixed density).
    """
    spec = problem.rewards
    states, times = traj_prev.states, traj_prev.times
    n_frames, n_particles, _ = states.shape
    quad = np.full(n_frames, traj_prev.dt)
    quad[0] = quad[-1] = traj_prev.dt / 2.0
    frame_prob = quad / quad.sum()
    energy = [t for t in spec.running if isinstance(t, ControlEnergy)]
    params = np.array(params_prev, copy=True)
    if adam is None:
        adam = AdamState.fresh(net.n_params, lr=lr)
    else:
        adam.lr = lr
    batch = min(cfg.train_batch, n_frames * n_particles)
    for _ in range(cfg.control_steps):
        f = rng.choice(n_frames, size=batch, p=frame_prob)
        i = rng.integers(0, n_particles, size=batch)
        x = states[f, i]
        tv = times[f]
        gp = table.grads[f, i]
        u_old = net.eval(params_prev, x, tv)
        tb = Tape()
        p = tb.leaf(params)
        u = net.eval_tape(tb, p, x, tv)
        loss = ad.mul(ad.vmean(ad.vsum(ad.mul(u, gp), axis=1)), -problem.T)
        for term in energy:
            loss = ad.add(loss, ad.mul(
                ad.vmean(ad.vsum(ad.square(u), axis=1)),
                problem.T * term.coeff))
        prox = ad.vmean(ad.vsum(ad.square(ad.sub(u, u_old)), axis=1))
        loss = ad.add(loss, ad.mul(prox, problem.T / (2.0 * cfg.step_size)))
        tb.backward(loss)
        if not np.isfinite(float(loss.value)):
            raise NonFiniteGradientError(f"inner loss became {loss.value!r}")
        params = adam_step(adam, params, tb.grad(p))
        params = net.project_caps(params)
    return params


def mp_control_update(problem: ControlProblem, net: FieldNet,
                      params_prev: np.ndarray, ens0: ParticleEnsemble,
                      phi_sol, cfg: SolverConfig, rng: np.random.Generator,
                      traj_prev: Trajectory | None = None,
                      table: AdjointFrameTable | None = None,
                      iteration: int = 1, adam_state=None):
    """Proximal Hamiltonian maximization; returns (params, trajectory).

    Collocation adjoints drive the differentiated-rollout loss; the
    characteristics backend uses the frame table on the frozen previous
    cloud.  A non-finite loss rolls back to the previous snapshot, halves
    the inner learning rate and retries once before aborting the iteration.
    """
    lr = max(cfg.control_lr * cfg.control_lr_decay ** (iteration - 1),
             cfg.control_lr_floor)
    # the proximal radius bounds how far one iteration may move; keep Adam's
    # (scale-free) steps inside it so eps -> 0 freezes the control
    lr = min(lr, 0.1 * cfg.step_size)
    for attempt in (0, 1):
        try:
            if table is not None and traj_prev is not None:
                params = _frozen_cloud_inner_steps(problem, net, params_prev,
                                                   traj_prev, table, cfg, rng, lr,
                                                   adam=adam_state)
            else:
                params = _rollout_inner_steps(problem, net, params_prev, ens0,
                                              phi_sol, cfg, rng, lr)
            traj = rollout(ens0, net.evaluator(params), problem.T, cfg.dt,
                           cfg.checkpoints)
            return params, traj
        except (NonFiniteGradientError, RolloutBlowupError) as exc:
            if attempt == 0:
                lr *= 0.5
                continue
            raise IterationAbortedError(
                f"control update failed twice: {exc}") from exc


def run(problem: ControlProblem, cfg: SolverConfig,
        ens0: ParticleEnsemble | None = None,
        ens_eval: ParticleEnsemble | None = None) -> SolverState:
    """Full alternating loop; returns the state even on mid-run failure.

    Ensembles are sampled from the problem's initial density unless supplied
    (the estimator front end fits directly on caller-provided particles).
    """
    ss = np.random.SeedSequence(cfg.seed)
    s_net, s_particles, s_eval, s_train, s_adj = (
        int(c.generate_state(1)[0]) for c in ss.spawn(5))
    net = FieldNet(dim=problem.dim, out_dim=problem.dim,
                   hidden=(cfg.control_width, cfg.control_width),
                   activation=cfg.control_activation, zero_init_output=True,
                   layer_cap=cfg.layer_cap, lipschitz_cap=cfg.lipschitz_cap)
    params = net.init_params(s_net)
    if ens0 is None:
        ens0 = sample_initial(problem.initial, cfg.n_particles, s_particles)
    if ens_eval is None:
        ens_eval = sample_initial(problem.initial, cfg.n_particles, s_eval) \
            if problem.initial is not None else ens0
    train_rng = np.random.default_rng(s_train)

    state = SolverState(net=net)
    inner_adam = AdamState.fresh(net.n_params, lr=cfg.control_lr) \
        if cfg.adjoint_backend == "characteristics" else None
    t_start = time.perf_counter()
    reward, se, traj = estimate_total_reward(problem, net.evaluator(params),
                                             cfg, ens_eval, pair_seed=s_eval)
    state.params.append(params.copy())
    state.trajectory = rollout(ens0, net.evaluator(params), problem.T, cfg.dt,
                               cfg.checkpoints)
    state.records.append({"k": 0, "reward": reward, "reward_se": se,
                          "delta": None, "adjoint_residual": None,
                          "wall_time": time.perf_counter() - t_start})

    warm = None
    for k in range(1, cfg.max_iters + 1):
        t_iter = time.perf_counter()
        u_prev = net.evaluator(params)
        prev_params = state.params[-1]
        try:
            source = running_deriv_field(problem.rewards, state.trajectory,
                                         u_prev, cloud_max=cfg.source_cloud_max,
                                         seed=s_adj + k)
            phi_sol = build_adjoint(problem, state.trajectory, u_prev, cfg,
                                    seed=s_adj + k, warm_params=warm,
                                    first=(k == 1), source=source)
            table = None
            if cfg.adjoint_backend == "characteristics":
                jac_fn = lambda x, t: net.jacobian_x(prev_params, x, t)
                table = sweep_adjoint_table(state.trajectory, jac_fn, u_prev,
                                            source, problem.rewards.terminal.g,
                                            problem.rewards.terminal.grad_g)
            if isinstance(phi_sol, CollocationAdjoint):
                warm = phi_sol.params
            new_params, traj_k = mp_control_update(problem, net, params, ens0,
                                                   phi_sol, cfg, train_rng,
                                                   traj_prev=state.trajectory,
                                                   table=table, iteration=k,
                                                   adam_state=inner_adam)
        except (IterationAbortedError, RolloutBlowupError,
                NonFiniteGradientError) as exc:
            state.status = f"aborted at k={k}: {exc}"
            return state

        probes = trajectory_probes(traj_k)
        delta = convergence_metric(net.evaluator(new_params), u_prev, probes)
        reward, se, _ = estimate_total_reward(problem, net.evaluator(new_params),
                                              cfg, ens_eval, pair_seed=s_eval)
        params = new_params
        state.params.append(params.copy())
        state.trajectory = traj_k
        state.records.append({
            "k": k, "reward": reward, "reward_se": se, "delta": delta,
            "adjoint_residual": getattr(phi_sol, "residual_rms", None),
            "wall_time": time.perf_counter() - t_iter,
        })
        if delta < cfg.tol:
            state.status = "converged"
            return state
    state.status = "max_iters"
    return state
