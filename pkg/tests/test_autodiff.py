import numpy as np
import pytest

from mpdc import autodiff as ad
from mpdc.autodiff import Tape


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


# one entry per primitive: builder(tape, leaf) -> scalar Var, input shape
OPS = {
    "add": (lambda x: ad.vsum(ad.mul(ad.add(x, 1.5), ad.add(x, x))), (3, 4)),
    "sub": (lambda x: ad.vsum(ad.square(ad.sub(2.0, x))), (5,)),
    "mul_broadcast": (lambda x: ad.vsum(ad.mul(x, np.array([1.0, -2.0, 3.0]))), (4, 3)),
    "neg": (lambda x: ad.vsum(ad.neg(ad.square(x))), (6,)),
    "matmul": (lambda x: ad.vsum(ad.matmul(x, np.arange(12.0).reshape(4, 3))), (5, 4)),
    "transpose": (lambda x: ad.vsum(ad.matmul(ad.transpose(x), x)), (4, 2)),
    "tanh": (lambda x: ad.vsum(ad.tanh(x)), (7,)),
    "sigmoid": (lambda x: ad.vsum(ad.sigmoid(x)), (7,)),
    "softplus": (lambda x: ad.vsum(ad.softplus(x)), (7,)),
    "exp": (lambda x: ad.vsum(ad.vexp(ad.mul(x, 0.3))), (5,)),
    "square": (lambda x: ad.vsum(ad.square(x)), (3, 3)),
    "reciprocal": (lambda x: ad.vsum(ad.reciprocal(ad.add(ad.square(x), 1.0))), (6,)),
    "sum_axis": (lambda x: ad.vsum(ad.square(ad.vsum(x, axis=1))), (4, 3)),
    "mean": (lambda x: ad.vmean(ad.square(x)), (5, 2)),
    "cols": (lambda x: ad.vsum(ad.square(ad.cols(x, 1, 3))), (4, 5)),
    "rows": (lambda x: ad.vsum(ad.square(ad.rows(x, 1, 3))), (5, 2)),
    "concat": (lambda x: ad.vsum(ad.square(ad.concat_cols(x, ad.mul(x, 2.0)))), (3, 2)),
    "segment": (lambda x: ad.vsum(ad.square(ad.segment(x, 2, (2, 3)))), (10,)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_match_central_differences(name):
    build, shape = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(6):
        x0 = rng.standard_normal(shape)

        def f(x):
            tb = Tape()
            return float(build(tb.leaf(x)).value)

        tb = Tape()
        leaf = tb.leaf(x0)
        out = build(leaf)
        tb.backward(out)
        g = tb.grad(leaf)
        g_fd = ad.numeric_gradient(f, x0, h=1e-4)
        assert rel_err(g, g_fd) <= 1e-5


def test_hundred_random_composite_cases():
    # composite graphs drawn from the primitive pool, gradient vs FD
    rng = np.random.default_rng(7)
    names = sorted(OPS)
    for case in range(100):
        name = names[case % len(names)]
        build, shape = OPS[name]
        x0 = rng.standard_normal(shape) * rng.uniform(0.5, 2.0)

        def f(x):
            tb = Tape()
            return float(build(tb.leaf(x)).value)

        tb = Tape()
        leaf = tb.leaf(x0)
        tb.backward(build(leaf))
        assert rel_err(tb.grad(leaf), ad.numeric_gradient(f, x0)) <= 1e-5


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(20)
    x0[np.abs(x0) < 0.05] += 0.2  # keep clear of the kink for the FD oracle

    def f(x):
        tb = Tape()
        return float(ad.vsum(ad.relu(tb.leaf(x))).value)

    tb = Tape()
    leaf = tb.leaf(x0)
    tb.backward(ad.vsum(ad.relu(leaf)))
    assert rel_err(tb.grad(leaf), ad.numeric_gradient(f, x0)) <= 1e-5


def test_replay_is_bit_identical():
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal((8, 5))
    w = rng.standard_normal((5, 3))

    def run():
        tb = Tape()
        leaf = tb.leaf(x0)
        out = ad.vsum(ad.tanh(ad.matmul(leaf, w)))
        tb.backward(out)
        return out.value.copy(), tb.grad(leaf).copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


def test_backward_requires_scalar_root():
    tb = Tape()
    leaf = tb.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError):
        tb.backward(ad.square(leaf))


def test_grad_before_backward_raises():
    tb = Tape()
    leaf = tb.leaf(np.ones(3))
    with pytest.raises(ad.DetachedLossError):
        tb.grad(leaf)


def test_cross_tape_loss_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(2))
    loss = ad.vsum(ad.square(a))
    with pytest.raises(ad.DetachedLossError):
        t2.backward(loss)


def test_unused_leaf_gets_zero_gradient():
    tb = Tape()
    a = tb.leaf(np.ones(3))
    b = tb.leaf(np.full(3, 2.0))
    tb.backward(ad.vsum(ad.square(a)))
    assert np.array_equal(tb.grad(b), np.zeros(3))
