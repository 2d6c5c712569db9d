import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpdc import autodiff as ad
from mpdc.autodiff import Tape
from mpdc.dynamics import AnalyticLQControl, Gaussian, ParticleEnsemble, sample_initial
from mpdc.rewards import (
    ControlEnergy,
    Cylinder,
    DoubleWedge,
    EmptyEnsembleError,
    ObstaclePenalty,
    PairRepulsion,
    QuadraticTerminal,
    RewardSpec,
    running_deriv,
    running_deriv_field,
    running_value,
    terminal_deriv,
    terminal_value,
)

ZERO_U = lambda x, t: np.zeros_like(np.atleast_2d(x))


def control_only(coeff=0.5):
    return RewardSpec(running=(ControlEnergy(coeff),),
                      terminal=QuadraticTerminal(center=np.zeros(2), weight=0.5))


def test_zero_control_zero_interaction_gives_zero():
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 64, seed=0)
    assert running_value(control_only(), ens, ZERO_U, 0.0) == 0.0


def test_lq_control_energy_at_point_mass():
    # u = x/(t-T-1) at t=0, T=1 on a point mass at (2, 0): -|(2,0)/(-2)|^2/2
    ens = ParticleEnsemble.uniform(np.array([[2.0, 0.0]]))
    val = running_value(control_only(), ens, AnalyticLQControl(T=1.0), 0.0)
    assert abs(val - (-0.5)) < 1e-14


def test_two_particle_interaction_matches_pair_mean():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    ens = ParticleEnsemble.uniform(pts)
    spec = RewardSpec(running=(PairRepulsion(gamma=5.0, kernel_const=0.1),),
                      terminal=QuadraticTerminal(center=np.zeros(3)))
    expected = -5.0 / 1.1
    exact = running_value(spec, ens, ZERO_U, 0.0)
    paired = running_value(spec, ens, ZERO_U, 0.0, rng=np.random.default_rng(0))
    assert abs(exact - expected) < 1e-12
    assert abs(paired - expected) < 1e-12


def test_paired_estimator_tracks_exact_double_sum():
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 2048, seed=3)
    spec = RewardSpec(running=(PairRepulsion(gamma=5.0, kernel_const=0.1),),
                      terminal=QuadraticTerminal(center=np.zeros(2)))
    exact = running_value(spec, ens, ZERO_U, 0.0)
    estimates = [running_value(spec, ens, ZERO_U, 0.0, rng=np.random.default_rng(s))
                 for s in range(20)]
    assert abs(np.mean(estimates) - exact) < 0.05 * abs(exact)


def test_empty_ensemble_rejected():
    with pytest.raises(Exception):
        ParticleEnsemble(points=np.zeros((0, 2)), weights=np.zeros(0))


def test_running_deriv_zero_case():
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 16, seed=1)
    d = running_deriv(control_only(), ens, ZERO_U, 0.0, np.zeros((3, 2)))
    assert np.array_equal(d, np.zeros(3))


def test_cylinder_obstacle_deriv_value():
    # x = (1, 0, ...): b = 0.75, eps = 0.1 -> -1/0.85
    spec = RewardSpec(running=(ObstaclePenalty(Cylinder(), eps=0.1),),
                      terminal=QuadraticTerminal(center=np.zeros(4)))
    ens = sample_initial(Gaussian(mean=np.zeros(4), var=1.0), 8, seed=2)
    q = np.zeros((1, 4))
    q[0, 0] = 1.0
    d = running_deriv(spec, ens, ZERO_U, 0.0, q)
    assert abs(d[0] - (-1.0 / 0.85)) < 1e-12


def test_interaction_deriv_consistent_with_reweighted_value():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((128, 2))
    term = PairRepulsion(gamma=5.0, kernel_const=0.1)
    spec = RewardSpec(running=(term,), terminal=QuadraticTerminal(center=np.zeros(2)))
    n = pts.shape[0]
    for trial in range(5):
        eta = rng.standard_normal(n)
        eta -= eta.mean()
        s = 1e-4

        def value(sign):
            w = (1.0 + sign * s * eta) / n
            ens = ParticleEnsemble(points=pts, weights=w / w.sum())
            return running_value(spec, ens, ZERO_U, 0.0)

        fd = (value(+1) - value(-1)) / (2 * s)
        ens0 = ParticleEnsemble.uniform(pts)
        deriv = running_deriv(spec, ens0, ZERO_U, 0.0, pts)
        inner = float(np.sum(eta / n * deriv))
        assert abs(fd - inner) <= 1e-3 * abs(inner) + 1e-9


def test_interaction_symmetry_under_half_swap():
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((64, 2))
    term = PairRepulsion(gamma=2.0, kernel_const=0.1)
    ia, ib = term.pairs_from(64, np.random.default_rng(1))
    a = term.per_particle_paired(pts, ia, ib).mean()
    b = term.per_particle_paired(pts, ib, ia).mean()
    assert a == b


def test_terminal_examples():
    spec = RewardSpec(running=(), terminal=QuadraticTerminal(center=np.zeros(2), weight=0.5))
    assert terminal_value(spec, ParticleEnsemble.uniform(np.zeros((1, 2)))) == 0.0

    x_star = np.array([1.0, -0.5, 0.0])
    spec2 = RewardSpec(running=(), terminal=QuadraticTerminal(center=x_star, weight=1.0))
    assert terminal_value(spec2, ParticleEnsemble.uniform(x_star[None, :])) == 0.0

    n = 40_000
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), n, seed=5)
    val = terminal_value(spec, ens)
    se = np.std(spec.terminal.g(ens.points)) / np.sqrt(n)
    assert abs(val - (-1.0)) < 3 * se
    assert np.array_equal(terminal_deriv(spec, ens.points[:5]),
                          spec.terminal.g(ens.points[:5]))


def test_double_wedge_clamped_nonnegative():
    wedge = DoubleWedge()
    pts = np.random.default_rng(0).uniform(-2, 2, size=(500, 2))
    b = wedge.b(pts)
    assert np.all(b >= 0)
    # inside the gate band the barrier is exactly zero
    assert wedge.b(np.array([[0.0, 0.0]]))[0] == 0.0
    # obstacle penalty is bounded by 1/eps as a result
    pen = ObstaclePenalty(wedge, eps=0.1)
    assert np.all(pen.per_particle(pts) >= -10.0 - 1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (10, 2), elements=st.floats(-20, 20)))
def test_running_penalties_nonpositive(pts):
    ens = ParticleEnsemble.uniform(pts)
    spec = RewardSpec(
        running=(ControlEnergy(0.5), PairRepulsion(gamma=1.0, kernel_const=0.1),
                 ObstaclePenalty(Cylinder(), eps=0.1)),
        terminal=QuadraticTerminal(center=np.zeros(2), weight=0.5),
    )
    u = lambda x, t: np.atleast_2d(x)  # arbitrary control
    val = running_value(spec, ens, u, 0.0, rng=np.random.default_rng(0))
    assert val <= 0
    assert terminal_value(spec, ens) <= 0


def test_tape_estimates_match_plain_values():
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((32, 2))
    u_vals = rng.standard_normal((32, 2))
    energy = ControlEnergy(0.5)
    inter = PairRepulsion(gamma=3.0, kernel_const=0.1)
    obst = ObstaclePenalty(Cylinder(), eps=0.1)
    tb = Tape()
    xv = tb.leaf(pts)
    uv = tb.leaf(u_vals)
    tape_total = (energy.tape_mean(tb, xv, uv).value
                  + inter.tape_mean(tb, xv, uv).value
                  + obst.tape_mean(tb, xv, uv).value)
    ia, ib = np.arange(16), np.arange(16, 32)
    plain_total = (energy.per_particle(pts, u_vals).mean()
                   + inter.per_particle_paired(pts, ia, ib).mean()
                   + obst.per_particle(pts).mean())
    assert abs(float(tape_total) - plain_total) < 1e-12


def test_terminal_tape_gradient_matches_grad_g():
    term = QuadraticTerminal(center=np.array([1.0, -0.5]), weight=1.0)
    pts = np.random.default_rng(3).standard_normal((6, 2))
    tb = Tape()
    xv = tb.leaf(pts)
    g = term.tape_grad_g(tb, xv)
    assert np.allclose(g.value, term.grad_g(pts), atol=1e-14)
    # and the tape value of g matches
    tb2 = Tape()
    assert np.allclose(term.tape_g(tb2, tb2.leaf(pts)).value, term.g(pts), atol=1e-14)


def test_running_deriv_field_uses_nearest_frame():
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 128, seed=6)
    from mpdc.dynamics import rollout
    traj = rollout(ens, lambda x, t: np.zeros_like(x), T=1.0, dt=0.25)
    spec = RewardSpec(running=(PairRepulsion(gamma=1.0, kernel_const=0.1),),
                      terminal=QuadraticTerminal(center=np.zeros(2)))
    src = running_deriv_field(spec, traj, ZERO_U)
    q = np.array([[0.3, -0.2]])
    # static cloud: the source is time-independent
    assert abs(src(q, 0.1)[0] - src(q, 0.9)[0]) < 1e-14
