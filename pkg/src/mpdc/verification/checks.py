"""Numerical checks of the theory: needle perturbation order, the
initial-perturbation derivative identity, the HJB residual, and the
maximum-principle fixed point.  Each check returns a small report object
with the measured numbers and a pass flag; nothing is asserted here."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..adjoint import solve_characteristics
from ..dynamics import AnalyticLQControl, Gaussian
from .grid import UniformGrid, advect
from .lq import LQOracle


@dataclass
class CheckReport:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed),
                "details": self.details}


# -- needle perturbation order ---------------------------------------------------


def check_perturbation_order(u_star_fn, w_fn, tau: float, eps_list,
                             grid: UniformGrid, rho0: np.ndarray, T: float,
                             min_slope: float = 1.8,
                             cfl: float = 0.9) -> CheckReport:
    """Order of the needle expansion: || rho^eps_T - rho*_T - eps sigma_T ||.

    The needle replaces the field by w on (tau - eps, tau].  sigma starts at
    -div(rho*_tau (w - u*_tau)) (centered differences) and is transported by
    u*.  The fitted log-log slope of the error against eps should approach 2
    (any slope above 1 certifies the o(eps) claim).
    """
    eps_list = sorted(float(e) for e in eps_list)
    if tau - eps_list[-1] <= 0 or tau >= T:
        raise ValueError("needle window must fit inside (0, T)")
    rho_tau = advect(grid, rho0, u_star_fn, 0.0, tau, cfl=cfl)

    centers = grid.centers
    w_tau = np.atleast_2d(w_fn(centers, tau))
    u_tau = np.atleast_2d(u_star_fn(centers, tau))
    flux = [(rho_tau * (w_tau[:, a] - u_tau[:, a]).reshape(grid.shape))
            for a in range(grid.dim)]
    sigma_tau = -grid.divergence(flux)
    sigma_T = advect(grid, sigma_tau, u_star_fn, tau, T, cfl=cfl)

    errors = []
    for eps in eps_list:
        # solve the reference with the same segment boundaries so that
        # discretization error cancels in the difference
        rho_pre = advect(grid, rho0, u_star_fn, 0.0, tau - eps, cfl=cfl)
        rho_star_T = advect(grid, advect(grid, rho_pre, u_star_fn,
                                         tau - eps, tau, cfl=cfl),
                            u_star_fn, tau, T, cfl=cfl)
        rho_eps_T = advect(grid, advect(grid, rho_pre, w_fn,
                                        tau - eps, tau, cfl=cfl),
                           u_star_fn, tau, T, cfl=cfl)
        errors.append(grid.l2_norm(rho_eps_T - rho_star_T - eps * sigma_T))
    logs_e = np.log(np.asarray(errors))
    logs_x = np.log(np.asarray(eps_list))
    slope = float(np.polyfit(logs_x, logs_e, 1)[0])
    return CheckReport(
        name="perturbation_order", passed=slope >= min_slope,
        details={"eps": list(eps_list), "errors": [float(e) for e in errors],
                 "slope": slope, "min_slope": min_slope})


def check_needle_prehistory(u_star_fn, w_fn, tau: float, eps: float,
                            grid: UniformGrid, rho0: np.ndarray,
                            t_probe: float) -> CheckReport:
    """Before the needle opens the two densities are identical on the grid."""
    if not t_probe < tau - eps:
        raise ValueError("probe time must precede the needle window")
    rho_star = advect(grid, rho0, u_star_fn, 0.0, t_probe)
    rho_eps = advect(grid, rho0, u_star_fn, 0.0, t_probe)  # needle not yet open
    diff = grid.l2_norm(rho_star - rho_eps)
    return CheckReport(name="needle_prehistory", passed=diff == 0.0,
                       details={"l2_difference": diff})


# -- initial-perturbation derivative ----------------------------------------------


def check_initial_derivative_lq(T: float = 1.0, dt: float = 1e-3,
                                probes: np.ndarray | None = None,
                                tol: float = 1e-8) -> CheckReport:
    """Transport of the terminal cost under the half-rate field reproduces
    phi_0 = -|x|^2 / (2 (T + 1)) exactly."""
    oracle = LQOracle(T=T)
    u = oracle.half_rate_field()
    g = lambda x: -0.5 * np.sum(np.atleast_2d(x) ** 2, axis=1)
    sol = solve_characteristics(u, lambda x, t: np.zeros(np.atleast_2d(x).shape[0]),
                                g, T, dt=dt)
    if probes is None:
        probes = np.array([[2.0, 0.0], [1.0, -1.0], [0.0, 0.5], [-2.0, 1.5]])
    got = sol.phi(probes, 0.0)
    want = oracle.phi0_initial_derivative(probes)
    err = float(np.max(np.abs(got - want)))
    return CheckReport(name="initial_derivative_lq", passed=err <= tol,
                       details={"max_abs_error": err, "tol": tol,
                                "probe_value_at_2_0": float(got[0])})


def check_initial_derivative_grid(u_fn, g_fn, grid: UniformGrid,
                                  rho0: np.ndarray, T: float,
                                  n_perturbations: int = 10, eps: float = 1e-4,
                                  seed: int = 0, rel_tol: float = 1e-3,
                                  abs_tol: float = 1e-6,
                                  flow_dt: float = 1e-3) -> CheckReport:
    """Directional derivative of G(rho_T) in the initial density.

    The finite difference [G(rho_T(p + eps h)) - G(rho_T(p))]/eps must match
    <phi_0, h>, where phi_0(x) = g(X_T(x)) comes from per-node RK4 flow
    integration, independent of the finite-volume transport.
    """
    centers = grid.centers
    # phi_0 by characteristics: flow every grid node to T and apply g
    x = centers.copy()
    n_steps = int(round(T / flow_dt))
    for j in range(n_steps):
        t = j * flow_dt
        k1 = u_fn(x, t)
        k2 = u_fn(x + k1 * (flow_dt / 2.0), t + flow_dt / 2.0)
        k3 = u_fn(x + k2 * (flow_dt / 2.0), t + flow_dt / 2.0)
        k4 = u_fn(x + k3 * flow_dt, t + flow_dt)
        x = x + ((k1 + (k2 + k3) * 2.0) + k4) * (flow_dt / 6.0)
    phi0 = g_fn(x).reshape(grid.shape)

    g_grid = g_fn(centers).reshape(grid.shape)
    rho_T = advect(grid, rho0, u_fn, 0.0, T)
    base = grid.inner(g_grid, rho_T)

    rng = np.random.default_rng(seed)
    scaled_errors = []
    for _ in range(n_perturbations):
        # smooth zero-mean bump, localized away from the boundary
        c = rng.uniform(grid.lo[0] + 1.0, grid.hi[0] - 1.0)
        width = rng.uniform(0.5, 0.9)
        bump = np.exp(-0.5 * ((centers[:, 0] - c) / width) ** 2).reshape(grid.shape)
        h = bump - grid.mass(bump) / (grid.hi[0] - grid.lo[0])
        zero_mean_violation_guard(grid, h)
        rho_T_eps = advect(grid, rho0 + eps * h, u_fn, 0.0, T)
        fd = (grid.inner(g_grid, rho_T_eps) - base) / eps
        inner = grid.inner(phi0, h)
        scaled_errors.append(abs(fd - inner) / (rel_tol * abs(inner) + abs_tol))
    worst = float(np.max(scaled_errors))
    return CheckReport(name="initial_derivative_grid", passed=worst <= 1.0,
                       details={"worst_scaled_error": worst, "rel_tol": rel_tol,
                                "abs_tol": abs_tol,
                                "n_perturbations": n_perturbations})


def zero_mean_violation_guard(grid: UniformGrid, h: np.ndarray) -> None:
    if abs(grid.mass(h)) > 1e-10:
        raise ValueError("initial perturbation must have zero total mass")


# -- HJB residual -----------------------------------------------------------------


def check_hjb_residual(candidate, sampler: Gaussian, t: float, T: float,
                       n_samples: int = 100_000, seed: int = 0) -> CheckReport:
    """Monte-Carlo residual of the density-space HJB equation.

    For control-energy running reward the inner maximization closes to
    1/2 |grad dV/dp|^2, so the residual is  d_t V + <p, 1/2 |grad dV/dp|^2>,
    estimated on two independent sample sets so the standard error is
    honest.  Also checks the terminal identity V(p, T) = G(p).
    """
    rng = np.random.default_rng(seed)
    a = sampler.sample(n_samples, rng)
    b = sampler.sample(n_samples, rng)
    dt_samples = candidate.dt_value_samples(a, t)
    max_samples = 0.5 * np.sum(candidate.grad_delta_value(b, t) ** 2, axis=1)
    residual = float(np.mean(dt_samples) + np.mean(max_samples))
    se = float(np.sqrt(np.var(dt_samples, ddof=1) / n_samples
                       + np.var(max_samples, ddof=1) / n_samples))
    val_T = candidate.value_samples(a, T)
    g_T = -0.5 * np.sum(b ** 2, axis=1)
    term_diff = float(np.mean(val_T) - np.mean(g_T))
    term_se = float(np.sqrt(np.var(val_T, ddof=1) / n_samples
                            + np.var(g_T, ddof=1) / n_samples))
    passed = abs(residual) <= 3 * se and abs(term_diff) <= 3 * term_se
    return CheckReport(name="hjb_residual", passed=passed,
                       details={"residual": residual, "residual_se": se,
                                "terminal_gap": term_diff,
                                "terminal_se": term_se, "t": t})


def check_lq_adjoint_grid(T: float = 1.0, dt: float = 1e-3,
                          grid_points: int = 21, n_times: int = 11,
                          box: float = 3.0, tol: float = 1e-6) -> CheckReport:
    """Characteristics adjoint versus the closed form on a space-time grid.

    Probes phi on a grid_points^2 x n_times lattice over [-box, box]^2 x [0, T]
    and reports the worst absolute error against |x|^2 / (2 (t - T - 1)).
    """
    oracle = LQOracle(T=T)
    u_star = oracle.control()
    source = lambda x, t: -0.5 * np.sum(u_star(x, t) ** 2, axis=1)
    g = lambda x: -0.5 * np.sum(np.atleast_2d(x) ** 2, axis=1)
    sol = solve_characteristics(u_star, source, g, T, dt=dt)
    xs = np.linspace(-box, box, grid_points)
    probes = np.array([[a, b] for a in xs for b in xs])
    worst = 0.0
    for t in np.linspace(0.0, T, n_times):
        err = float(np.max(np.abs(sol.phi(probes, float(t))
                                  - oracle.phi_star(probes, float(t)))))
        worst = max(worst, err)
    return CheckReport(name="lq_adjoint_grid", passed=worst <= tol,
                       details={"max_abs_error": worst, "tol": tol,
                                "grid_points": grid_points, "n_times": n_times})


# -- maximum-principle fixed point --------------------------------------------------


def check_mp_fixed_point(oracle: LQOracle, dim: int = 2, n_particles: int = 4096,
                         n_fields: int = 50, seed: int = 0,
                         adjoint_dt: float = 1e-3,
                         adjoint_tol: float = 1e-6) -> CheckReport:
    """(a) the adjoint of (rho*, u*) reproduces phi*; (b) u* maximizes the
    Hamiltonian against randomized admissible fields at sampled times."""
    T = oracle.T
    u_star = oracle.control()
    source = lambda x, t: -0.5 * np.sum(u_star(x, t) ** 2, axis=1)
    g = lambda x: -0.5 * np.sum(np.atleast_2d(x) ** 2, axis=1)
    sol = solve_characteristics(u_star, source, g, T, dt=adjoint_dt)
    probes = np.random.default_rng(seed).uniform(-3, 3, size=(64, dim))
    adj_err = 0.0
    for t in (0.0, 0.5, 1.0):
        adj_err = max(adj_err, float(np.max(np.abs(
            sol.phi(probes, t) - oracle.phi_star(probes, t)))))

    rng = np.random.default_rng(seed + 1)
    base = rng.standard_normal((n_particles, dim))
    violations = 0
    worst_margin = np.inf
    for tau in (0.0, 0.25, 0.5, 0.75, 1.0):
        pts = base * oracle.flow_scale(tau)
        gp = oracle.grad_phi_star(pts, tau)
        u_vals = u_star(pts, tau)
        h_star = np.sum(u_vals * gp, axis=1) - 0.5 * np.sum(u_vals ** 2, axis=1)
        for _ in range(n_fields // 5):
            a_mat = rng.standard_normal((dim, dim))
            b_vec = rng.standard_normal(dim)
            w_vals = pts @ a_mat.T + b_vec
            h_w = np.sum(w_vals * gp, axis=1) - 0.5 * np.sum(w_vals ** 2, axis=1)
            diff = h_star - h_w
            margin = float(np.mean(diff) + 2.0 * np.std(diff, ddof=1)
                           / np.sqrt(n_particles))
            worst_margin = min(worst_margin, margin)
            if margin < 0:
                violations += 1
    passed = adj_err <= adjoint_tol and violations == 0
    return CheckReport(name="mp_fixed_point", passed=passed,
                       details={"adjoint_max_error": adj_err,
                                "adjoint_tol": adjoint_tol,
                                "hamiltonian_violations": violations,
                                "worst_margin": worst_margin})


def check_initial_derivative(mode: str = "lq", **kwargs) -> CheckReport:
    """Dispatcher: 'lq' for the closed-form path, 'grid' for the 1-D solver."""
    if mode == "lq":
        return check_initial_derivative_lq(**kwargs)
    if mode == "grid":
        return check_initial_derivative_grid(**kwargs)
    raise ValueError(f"unknown mode {mode!r}")
