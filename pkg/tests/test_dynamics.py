import numpy as np
import pytest

from mpdc import autodiff as ad
from mpdc.dynamics import (
    AnalyticLQControl,
    Gaussian,
    InvalidDensityError,
    ParticleEnsemble,
    RolloutBlowupError,
    TruncExpGaussian,
    UnsupportedFieldError,
    pushforward_density_check,
    rollout,
    rollout_with_param_grad,
    sample_initial,
)
from mpdc.fields import FieldNet


def test_degenerate_gaussian_rejected():
    with pytest.raises(InvalidDensityError):
        Gaussian(mean=np.zeros(3), var=0.0)


def test_weights_must_sum_to_one():
    with pytest.raises(InvalidDensityError):
        ParticleEnsemble(points=np.zeros((2, 1)), weights=np.array([0.6, 0.6]))


def test_gaussian_sample_mean():
    d, n = 8, 10_000
    ens = sample_initial(Gaussian(mean=-2.0 * np.ones(d), var=0.5), n, seed=123)
    tol = 4.0 * np.sqrt(0.5) / np.sqrt(n)
    assert np.all(np.abs(ens.points.mean(axis=0) + 2.0) < tol)
    assert abs(ens.weights.sum() - 1.0) < 1e-12


def test_trunc_exp_gaussian_support():
    ens = sample_initial(TruncExpGaussian(dim=3), 10_000, seed=5)
    assert np.all(ens.points[:, 0] <= -0.5)
    # second coordinate is Gaussian around 0.5
    assert abs(ens.points[:, 1].mean() - 0.5) < 4 * 0.5 / 100


def test_sampling_is_seed_deterministic():
    a = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 100, seed=9)
    b = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 100, seed=9)
    assert np.array_equal(a.points, b.points)


def test_zero_field_keeps_ensemble_constant():
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 50, seed=1)
    traj = rollout(ens, lambda x, t: np.zeros_like(x), T=1.0, dt=0.05,
                   checkpoints=(0.0, 0.5, 1.0))
    for t in (0.0, 0.5, 1.0):
        assert np.array_equal(traj.ensemble_at(t).points, ens.points)
    assert np.array_equal(traj.weights, ens.weights)


def test_lq_flow_matches_exact_scaling():
    u = AnalyticLQControl(T=1.0)
    ens = ParticleEnsemble.uniform(np.array([[1.0, 1.0]]))
    traj = rollout(ens, u, T=1.0, dt=1e-3, checkpoints=(0.0, 0.5, 1.0))
    assert np.allclose(traj.ensemble_at(1.0).points, [[0.5, 0.5]], atol=1e-9)
    assert np.allclose(traj.ensemble_at(0.5).points, [[0.75, 0.75]], atol=1e-9)


def test_second_moment_scale_laws():
    # full-rate optimal field contracts coordinates by (T+1-t)/(T+1)
    n = 4096
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), n, seed=11)
    m0 = np.mean(ens.points ** 2, axis=0)
    traj = rollout(ens, AnalyticLQControl(T=1.0), T=1.0, dt=0.01)
    mT = np.mean(traj.ensemble_at(1.0).points ** 2, axis=0)
    se = np.std(traj.ensemble_at(1.0).points ** 2, axis=0) / np.sqrt(n)
    assert np.all(np.abs(mT - 0.25 * m0) < 3 * se)

    # half-rate transport field scales the variance by 1/(T+1)
    traj2 = rollout(ens, AnalyticLQControl(T=1.0, rate=0.5), T=1.0, dt=0.01)
    mT2 = np.mean(traj2.ensemble_at(1.0).points ** 2, axis=0)
    se2 = np.std(traj2.ensemble_at(1.0).points ** 2, axis=0) / np.sqrt(n)
    assert np.all(np.abs(mT2 - 0.5 * m0) < 3 * se2)


def test_rk4_observed_order():
    # the half-rate field has the non-polynomial flow x0 * sqrt((2 - t)/2),
    # so truncation error is visible (the full-rate flow is linear in t and
    # integrated exactly by RK4)
    u = AnalyticLQControl(T=1.0, rate=0.5)
    x0 = np.array([[2.0, -1.0]])
    exact = x0 * np.sqrt(0.5)
    errs = []
    for dt in (0.125, 0.0625):
        traj = rollout(ParticleEnsemble.uniform(x0), u, T=1.0, dt=dt)
        errs.append(np.max(np.abs(traj.states[-1] - exact)))
    order = np.log2(errs[0] / errs[1])
    assert order >= 3.5


def test_rollout_blowup_reports_particle_and_time():
    ens = ParticleEnsemble.uniform(np.array([[1.0], [2.0]]))
    with pytest.raises(RolloutBlowupError, match="particle"):
        rollout(ens, lambda x, t: x ** 3 * 1e4, T=1.0, dt=0.05)


def test_dt_must_divide_checkpoint_gaps():
    ens = ParticleEnsemble.uniform(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        rollout(ens, lambda x, t: x, T=1.0, dt=0.3, checkpoints=(0.0, 0.25, 1.0))


def test_pushforward_scale_values():
    u = AnalyticLQControl(T=1.0)
    p = Gaussian(mean=np.zeros(2), var=1.0)
    assert pushforward_density_check(p, u, 0.0).coordinate_scale == 1.0
    assert pushforward_density_check(p, u, 1.0).coordinate_scale == 0.5
    assert pushforward_density_check(p, u, 0.5).coordinate_scale == 0.75
    with pytest.raises(UnsupportedFieldError):
        pushforward_density_check(p, lambda x, t: x, 0.5)


class _ZeroLoss:
    def running(self, tb, j, n_steps, t, w, x, u_of):
        return None

    def terminal(self, tb, x_final):
        return None


class _TerminalHalfSq:
    def running(self, tb, j, n_steps, t, w, x, u_of):
        return None

    def terminal(self, tb, x_final):
        return ad.mul(ad.vsum(ad.square(x_final)), 0.5)


def test_zero_loss_gives_zero_gradient():
    net = FieldNet(dim=2, out_dim=2, hidden=(6, 6), zero_init_output=False,
                   layer_cap=None)
    params = net.init_params(0)
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 8, seed=2)
    _, value, grad = rollout_with_param_grad(ens, net, params, T=1.0, dt=0.1,
                                             loss=_ZeroLoss())
    assert value == 0.0
    assert np.array_equal(grad, np.zeros_like(params))


def test_linear_field_terminal_gradient_matches_closed_form():
    # u(x) = theta * x in d=1; L = x(T)^2 / 2 gives dL/dtheta = T x0^2 e^(2 theta T)
    net = FieldNet(dim=1, out_dim=1, hidden=(), zero_init_output=True,
                   layer_cap=None)
    theta = 0.3
    params = np.zeros(net.n_params)
    params[0] = theta  # weight on x; time weight and bias stay zero
    x0 = 1.7
    ens = ParticleEnsemble.uniform(np.array([[x0]]))
    _, value, grad = rollout_with_param_grad(ens, net, params, T=1.0, dt=1e-3,
                                             loss=_TerminalHalfSq())
    expected_value = 0.5 * x0 ** 2 * np.exp(2 * theta)
    expected_grad = x0 ** 2 * np.exp(2 * theta)
    assert abs(value - expected_value) <= 1e-8 * expected_value
    assert abs(grad[0] - expected_grad) <= 1e-6 * expected_grad


class _MixedLoss:
    """Running control energy plus terminal quadratic, all differentiable."""

    def running(self, tb, j, n_steps, t, w, x, u_of):
        u = u_of(x, t)
        return ad.mul(ad.vmean(ad.vsum(ad.square(u), axis=1)), 0.5 * w)

    def terminal(self, tb, x_final):
        return ad.vmean(ad.vsum(ad.square(x_final), axis=1))


def test_random_net_gradient_matches_finite_differences():
    net = FieldNet(dim=2, out_dim=2, hidden=(5, 5), zero_init_output=False,
                   layer_cap=None)
    params = 0.5 * net.init_params(3)
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 6, seed=4)

    def f(p):
        _, value, _ = rollout_with_param_grad(ens, net, p, T=1.0, dt=0.1,
                                              loss=_MixedLoss())
        return value

    _, _, grad = rollout_with_param_grad(ens, net, params, T=1.0, dt=0.1,
                                         loss=_MixedLoss())
    fd = ad.numeric_gradient(f, params, h=1e-5)
    denom = max(np.max(np.abs(fd)), 1e-8)
    assert np.max(np.abs(grad - fd)) / denom <= 1e-4


def test_tape_and_plain_rollouts_agree_bitwise():
    net = FieldNet(dim=2, out_dim=2, hidden=(6, 6), zero_init_output=False,
                   layer_cap=None)
    params = net.init_params(1)
    ens = sample_initial(Gaussian(mean=np.zeros(2), var=1.0), 16, seed=7)
    traj_plain = rollout(ens, net.evaluator(params), T=1.0, dt=0.05)
    traj_tape, _, _ = rollout_with_param_grad(ens, net, params, T=1.0, dt=0.05,
                                              loss=_ZeroLoss())
    assert np.array_equal(traj_plain.states, traj_tape.states)
    # replaying is bit-identical as well
    traj_again = rollout(ens, net.evaluator(params), T=1.0, dt=0.05)
    assert np.array_equal(traj_plain.states, traj_again.states)
