import numpy as np
import pytest

from mpdc import autodiff as ad
from mpdc.autodiff import Tape
from mpdc.fields import FieldNet
from mpdc.optim import AdamState, NonFiniteGradientError, adam_step


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def small_net(out_dim=2, activation="softplus", seed=0, zero_out=False):
    net = FieldNet(dim=3, out_dim=out_dim, hidden=(8, 8), activation=activation,
                   zero_init_output=zero_out, layer_cap=None)
    return net, net.init_params(seed)


def test_zero_output_layer_gives_zero_field():
    net = FieldNet(dim=4, out_dim=4, hidden=(6, 6), zero_init_output=True)
    params = net.init_params(1)
    x = np.random.default_rng(0).standard_normal((10, 4))
    assert np.array_equal(net.eval(params, x, 0.3), np.zeros((10, 4)))


def test_identity_linear_layer():
    # single linear layer configured as the identity on x
    net = FieldNet(dim=2, out_dim=2, hidden=(), zero_init_output=True,
                   layer_cap=None)
    params = np.zeros(net.n_params)
    w = np.zeros((3, 2))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    params[:6] = w.ravel()
    out = net.eval(params, np.array([1.0, 2.0]), 0.0)
    assert np.allclose(out, [[1.0, 2.0]], atol=0)


def test_seeded_init_and_eval_replay():
    net, params = small_net(seed=7)
    assert np.array_equal(params, net.init_params(7))
    x = np.random.default_rng(5).standard_normal((4, 3))
    assert np.array_equal(net.eval(params, x, 0.2), net.eval(params, x, 0.2))


def test_non_finite_input_rejected():
    net, params = small_net()
    x = np.ones((2, 3))
    x[1, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        net.eval(params, x, 0.0)


def test_param_gradient_constant_loss_is_zero():
    net, params = small_net()
    tb = Tape()
    p = tb.leaf(params)
    out = net.eval_tape(tb, p, np.zeros((2, 3)), 0.0)
    loss = ad.sub(ad.vsum(out), ad.vsum(out))
    tb.backward(loss)
    assert np.array_equal(tb.grad(p), np.zeros_like(params))


def test_param_gradient_quadratic_identity():
    net, params = small_net()
    tb = Tape()
    p = tb.leaf(params)
    loss = ad.mul(ad.vsum(ad.square(p)), 0.5)
    tb.backward(loss)
    assert np.allclose(tb.grad(p), params, rtol=0, atol=1e-14)


@pytest.mark.parametrize("activation", ["softplus", "tanh"])
@pytest.mark.parametrize("out_dim", [1, 3])
def test_param_gradient_matches_finite_differences(activation, out_dim):
    net, params = small_net(out_dim=out_dim, activation=activation, seed=3)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((6, 3))

    def f(p):
        tb = Tape()
        out = net.eval_tape(tb, tb.leaf(p), x, 0.4)
        return float(ad.vsum(ad.square(out)).value)

    tb = Tape()
    p = tb.leaf(params)
    tb.backward(ad.vsum(ad.square(net.eval_tape(tb, p, x, 0.4))))
    assert rel_err(tb.grad(p), ad.numeric_gradient(f, params)) <= 1e-5


def test_position_gradient_matches_finite_differences():
    net, params = small_net(out_dim=2, seed=4)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((5, 3))

    def f(x):
        tb = Tape()
        out = net.eval_tape(tb, params, tb.leaf(x), 0.1)
        return float(ad.vsum(ad.square(out)).value)

    tb = Tape()
    xv = tb.leaf(x0)
    tb.backward(ad.vsum(ad.square(net.eval_tape(tb, params, xv, 0.1))))
    assert rel_err(tb.grad(xv), ad.numeric_gradient(f, x0)) <= 1e-5


def test_grad_x_constant_field_is_zero():
    net = FieldNet(dim=3, out_dim=1, hidden=(8, 8), zero_init_output=True)
    params = net.init_params(0)
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(net.grad_x(params, x, 0.5), np.zeros((4, 3)))


def test_grad_x_matches_finite_differences():
    for activation in ("softplus", "tanh"):
        net, params = small_net(out_dim=1, activation=activation, seed=8)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((5, 3))
        vals, grads = net.value_and_grad_full(params, x, 0.7)
        assert np.allclose(vals, net.eval(params, x, 0.7)[:, 0])
        h = 1e-5
        for c in range(3):
            dx = np.zeros(3)
            dx[c] = h
            fd = (net.eval(params, x + dx, 0.7) - net.eval(params, x - dx, 0.7)) / (2 * h)
            assert rel_err(grads[:, c], fd[:, 0]) <= 1e-5
        fd_t = (net.eval(params, x, 0.7 + h) - net.eval(params, x, 0.7 - h)) / (2 * h)
        assert rel_err(grads[:, 3], fd_t[:, 0]) <= 1e-5


def test_jacobian_matches_finite_differences():
    net, params = small_net(out_dim=3, seed=10)
    x = np.random.default_rng(4).standard_normal((4, 3))
    jac = net.jacobian_x(params, x, 0.2)
    h = 1e-5
    for c in range(3):
        dx = np.zeros(3)
        dx[c] = h
        fd = (net.eval(params, x + dx, 0.2) - net.eval(params, x - dx, 0.2)) / (2 * h)
        assert rel_err(jac[:, :, c], fd) <= 1e-5


def test_tape_grad_graph_matches_plain_and_supports_second_order():
    net, params = small_net(out_dim=1, activation="tanh", seed=6)
    x0 = np.random.default_rng(3).standard_normal((4, 3))

    tb = Tape()
    out, grad = net.tape_value_and_grad_full(tb, params, tb.leaf(x0), 0.3)
    vals_ref, grads_ref = net.value_and_grad_full(params, x0, 0.3)
    assert np.allclose(out.value[:, 0], vals_ref, atol=1e-12)
    assert np.allclose(grad.value, grads_ref, atol=1e-12)

    # differentiate a function of the gradient (Hessian-vector content)
    def f(x):
        tb = Tape()
        _, g = net.tape_value_and_grad_full(tb, params, tb.leaf(x), 0.3)
        return float(ad.vsum(ad.square(ad.cols(g, 0, 3))).value)

    tb = Tape()
    xv = tb.leaf(x0)
    _, g = net.tape_value_and_grad_full(tb, params, xv, 0.3)
    tb.backward(ad.vsum(ad.square(ad.cols(g, 0, 3))))
    assert rel_err(tb.grad(xv), ad.numeric_gradient(f, x0)) <= 1e-4


def test_tape_grad_graph_param_gradients():
    # training signal through a gradient-based loss (collocation residuals)
    net, params = small_net(out_dim=1, activation="tanh", seed=2)
    x = np.random.default_rng(8).standard_normal((3, 3))

    def f(p):
        tb = Tape()
        _, g = net.tape_value_and_grad_full(tb, tb.leaf(p), x, 0.6)
        return float(ad.vsum(ad.square(g)).value)

    tb = Tape()
    p = tb.leaf(params)
    _, g = net.tape_value_and_grad_full(tb, p, x, 0.6)
    tb.backward(ad.vsum(ad.square(g)))
    assert rel_err(tb.grad(p), ad.numeric_gradient(f, params)) <= 1e-5


def test_layer_cap_projection_is_idempotent():
    net = FieldNet(dim=2, out_dim=2, hidden=(6, 6), layer_cap=0.5,
                   zero_init_output=False)
    params = 3.0 * net.init_params(5)
    once = net.project_caps(params)
    twice = net.project_caps(once)
    assert np.array_equal(once, twice)
    for w, _ in net._matrices(once):
        assert np.linalg.norm(w) <= 0.5


def test_lipschitz_product_cap():
    net = FieldNet(dim=2, out_dim=2, hidden=(6, 6), layer_cap=None,
                   lipschitz_cap=2.0, zero_init_output=False)
    params = 5.0 * net.init_params(3)
    proj = net.project_caps(params)
    assert net.lipschitz_bound(proj) <= 2.0
    assert np.array_equal(net.project_caps(proj), proj)


def test_adam_zero_gradient_keeps_params():
    state = AdamState.fresh(4, lr=0.1)
    params = np.array([1.0, -2.0, 3.0, 0.0])
    new = adam_step(state, params, np.zeros(4))
    assert np.array_equal(new, params)
    assert state.step == 1


def test_adam_single_step_hand_computed():
    state = AdamState.fresh(3, lr=0.01)
    params = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-12])
    new = adam_step(state, params, g)
    # with fresh moments the bias-corrected update is -lr * g / (|g| + eps)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new, expected, rtol=1e-12, atol=0)


def test_adam_constant_gradient_reaches_sign_step():
    state = AdamState.fresh(2, lr=0.05)
    params = np.zeros(2)
    g = np.array([3.0, -0.25])
    prev = params
    for _ in range(500):
        prev, params = params, adam_step(state, params, g)
    step = params - prev
    assert np.allclose(step, -0.05 * np.sign(g), rtol=0.02)


def test_adam_rejects_nan_gradient():
    state = AdamState.fresh(2)
    with pytest.raises(NonFiniteGradientError):
        adam_step(state, np.zeros(2), np.array([1.0, np.nan]))
