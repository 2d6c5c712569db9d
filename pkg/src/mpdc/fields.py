"""Parameterized control/adjoint fields: residual MLPs on (x, t).

A :class:`FieldNet` maps ``(x, t)`` with ``x`` in R^d to R^out through two
hidden layers (second one with a skip connection when widths allow).  The
parameter vector is flat and treated as an immutable snapshot: every method
takes it explicitly, so optimizer state and field evaluation never share
mutable storage.

Spatial/temporal input gradients are available both as plain arrays and as
tape graphs.  The tape variant expresses the backward chain itself in
primitive ops, so losses built on top of a field *gradient* (PDE residuals,
Hamiltonian couplings) remain differentiable with respect to parameters and
positions.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

_SMOOTH = ("tanh", "softplus")
_ACTIVATIONS = ("tanh", "softplus", "relu")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "softplus":
        return ad._softplus(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_prime(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if name == "softplus":
        return 1.0 - np.exp(-ad._softplus(a))
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    raise ValueError(f"unknown activation {name!r}")


def _tape_act(name: str, a):
    if name == "tanh":
        return ad.tanh(a)
    if name == "softplus":
        return ad.softplus(a)
    if name == "relu":
        return ad.relu(a)
    raise ValueError(f"unknown activation {name!r}")


def _tape_act_prime(name: str, a):
    if name == "tanh":
        return ad.sub(1.0, ad.square(ad.tanh(a)))
    if name == "softplus":
        return ad.sigmoid(a)
    raise ValueError(f"activation {name!r} has no usable second derivative")


class FieldNet:
    """Residual MLP ``(x, t) -> R^out`` with a flat parameter vector."""

    def __init__(self, dim: int, out_dim: int, hidden=(100, 100),
                 activation: str = "softplus", residual: bool = True,
                 zero_init_output: bool = True, layer_cap: float | None = 10.0,
                 lipschitz_cap: float | None = None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dim = int(dim)
        self.out_dim = int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.zero_init_output = zero_init_output
        self.layer_cap = layer_cap
        self.lipschitz_cap = lipschitz_cap

        widths = [self.dim + 1, *self.hidden, self.out_dim]
        self._shapes = [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        # skip connections on hidden blocks whose input/output widths agree
        self._residual = [residual and i > 0 and a == b
                          for i, (a, b) in enumerate(self._shapes[:-1])]
        self._offsets = []
        off = 0
        for n_in, n_out in self._shapes:
            self._offsets.append(off)
            off += n_in * n_out + n_out
        self.n_params = off

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(self.n_params)
        last = len(self._shapes) - 1
        for k, (n_in, n_out) in enumerate(self._shapes):
            if k == last and self.zero_init_output:
                continue
            s = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-s, s, size=(n_in, n_out))
            off = self._offsets[k]
            params[off:off + n_in * n_out] = w.ravel()
        return params

    def _matrices(self, params: np.ndarray):
        out = []
        for off, (n_in, n_out) in zip(self._offsets, self._shapes):
            w = params[off:off + n_in * n_out].reshape(n_in, n_out)
            b = params[off + n_in * n_out:off + n_in * n_out + n_out]
            out.append((w, b))
        return out

    def _tape_matrices(self, params):
        if not isinstance(params, Var):
            return self._matrices(np.asarray(params, dtype=np.float64))
        out = []
        for off, (n_in, n_out) in zip(self._offsets, self._shapes):
            w = ad.segment(params, off, (n_in, n_out))
            b = ad.segment(params, off + n_in * n_out, (n_out,))
            out.append((w, b))
        return out

    # -- plain evaluation ----------------------------------------------------

    def _stack_inputs(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        n = x.shape[0]
        tcol = np.full((n, 1), float(t)) if np.ndim(t) == 0 else \
            np.asarray(t, dtype=np.float64).reshape(n, 1)
        return np.concatenate([x, tcol], axis=1)

    def eval(self, params: np.ndarray, x: np.ndarray, t) -> np.ndarray:
        """Field values at points ``x`` and time(s) ``t``; rejects non-finite input."""
        z = self._stack_inputs(x, t)
        if not np.all(np.isfinite(z)):
            bad = int(np.flatnonzero(~np.isfinite(z).all(axis=1))[0])
            raise ValueError(f"non-finite field input at row {bad}")
        mats = self._matrices(params)
        h = z
        for k, (w, b) in enumerate(mats[:-1]):
            a = h @ w + b
            h = _act(self.activation, a) + (h if self._residual[k] else 0.0)
        w, b = mats[-1]
        return h @ w + b

    def evaluator(self, params: np.ndarray) -> Callable[[np.ndarray, float], np.ndarray]:
        """Closure over an (immutable) parameter snapshot."""
        snap = np.array(params, copy=True)
        snap.setflags(write=False)
        return lambda x, t: self.eval(snap, x, t)

    # -- tape evaluation -----------------------------------------------------

    def eval_tape(self, tb: Tape, params, x, t):
        """Record the forward pass on ``tb``; ``params``/``x`` may be Vars."""
        if isinstance(x, Var):
            n = x.value.shape[0]
            tcol = np.full((n, 1), float(t)) if np.ndim(t) == 0 else \
                np.asarray(t, dtype=np.float64).reshape(n, 1)
            z = ad.concat_cols(x, tcol)
        else:
            z = self._stack_inputs(x, t)
        mats = self._tape_matrices(params)
        h = z
        for k, (w, b) in enumerate(mats[:-1]):
            a = ad.affine(h, w, b) if isinstance(h, Var) or isinstance(w, Var) \
                else h @ w + b
            act = _tape_act(self.activation, a) if isinstance(a, Var) \
                else _act(self.activation, a)
            if self._residual[k]:
                h = ad.add(act, h) if isinstance(act, Var) or isinstance(h, Var) else act + h
            else:
                h = act
        w, b = mats[-1]
        if isinstance(h, Var) or isinstance(w, Var):
            return ad.affine(h, w, b)
        raise TypeError("eval_tape called with no Var operands")

    def tape_value_and_grad_full(self, tb: Tape, params, x, t):
        """Forward value and input gradient ``d(out)/d(x, t)`` as tape nodes.

        Scalar-output nets only; the gradient is computed by an explicit
        backward chain written in primitives, so it can be differentiated
        again (needed when a loss contains the field's spatial gradient).
        """
        if self.out_dim != 1:
            raise ValueError("tape input-gradients only supported for scalar fields")
        if self.activation not in _SMOOTH:
            raise ValueError("input gradients need a smooth activation")
        if isinstance(x, Var):
            n = x.value.shape[0]
            tcol = np.full((n, 1), float(t)) if np.ndim(t) == 0 else \
                np.asarray(t, dtype=np.float64).reshape(n, 1)
            z = ad.concat_cols(x, tcol)
        else:
            z = self._stack_inputs(x, t)
            n = z.shape[0]
        mats = self._tape_matrices(params)

        pres = []
        h = z
        for k, (w, b) in enumerate(mats[:-1]):
            a = ad.affine(h, w, b)
            act = _tape_act(self.activation, a)
            h = ad.add(act, h) if self._residual[k] else act
            pres.append(a)
        w_out, b_out = mats[-1]
        out = ad.affine(h, w_out, b_out)

        ones = np.ones((n, 1))
        g = ad.matmul(ones, ad.transpose(w_out)) if isinstance(w_out, Var) \
            else ad.matmul(tb.leaf(ones), w_out.T)
        for k in range(len(pres) - 1, -1, -1):
            ga = ad.mul(g, _tape_act_prime(self.activation, pres[k]))
            w, _ = mats[k]
            back = ad.matmul(ga, ad.transpose(w)) if isinstance(w, Var) \
                else ad.matmul(ga, w.T)
            g = ad.add(back, g) if self._residual[k] else back
        return out, g

    # -- plain input gradients -----------------------------------------------

    def value_and_grad_full(self, params: np.ndarray, x: np.ndarray, t):
        """Values ``(n,)`` and input gradients ``(n, d+1)`` for scalar fields."""
        if self.out_dim != 1:
            raise ValueError("value_and_grad_full requires a scalar field")
        vals, jac = self._forward_backward(params, x, t)
        return vals[:, 0], jac[:, 0, :]

    def jacobian_x(self, params: np.ndarray, x: np.ndarray, t) -> np.ndarray:
        """Spatial Jacobian ``(n, out, d)`` (drops the time column)."""
        _, jac = self._forward_backward(params, x, t)
        return jac[:, :, :self.dim]

    def grad_x(self, params: np.ndarray, x: np.ndarray, t) -> np.ndarray:
        """Spatial gradient: ``(n, d)`` for scalar fields, else ``(n, out, d)``."""
        jac = self.jacobian_x(params, x, t)
        return jac[:, 0, :] if self.out_dim == 1 else jac

    def _forward_backward(self, params: np.ndarray, x: np.ndarray, t):
        z = self._stack_inputs(x, t)
        mats = self._matrices(params)
        pres = []
        h = z
        for k, (w, b) in enumerate(mats[:-1]):
            a = h @ w + b
            pres.append(a)
            h = _act(self.activation, a) + (h if self._residual[k] else 0.0)
        w_out, b_out = mats[-1]
        vals = h @ w_out + b_out

        n = z.shape[0]
        jac = np.empty((n, self.out_dim, self.dim + 1))
        for j in range(self.out_dim):
            g = np.broadcast_to(w_out[:, j], (n, w_out.shape[0])).copy()
            for k in range(len(pres) - 1, -1, -1):
                ga = g * _act_prime(self.activation, pres[k])
                back = ga @ mats[k][0].T
                g = back + g if self._residual[k] else back
            jac[:, j, :] = g
        return vals, jac

    # -- norm caps ------------------------------------------------------------

    def _layer_bounds(self, params: np.ndarray) -> list[float]:
        bounds = []
        for k, (w, _) in enumerate(self._matrices(params)):
            fro = float(np.linalg.norm(w))
            bounds.append(1.0 + fro if k < len(self._shapes) - 1 and self._residual[k] else fro)
        return bounds

    def lipschitz_bound(self, params: np.ndarray) -> float:
        """Product of per-layer operator-norm bounds (Frobenius majorant)."""
        return float(np.prod(self._layer_bounds(params)))

    def project_caps(self, params: np.ndarray) -> np.ndarray:
        """Clip per-layer weight norms, then the total Lipschitz product.

        Idempotent: projecting an already-feasible vector returns it unchanged.
        """
        params = np.array(params, copy=True)
        if self.layer_cap is not None:
            for off, (n_in, n_out) in zip(self._offsets, self._shapes):
                w = params[off:off + n_in * n_out]
                fro = float(np.linalg.norm(w))
                if fro > self.layer_cap:
                    w *= (self.layer_cap / fro) * (1.0 - 1e-12)
        if self.lipschitz_cap is not None and \
                self.lipschitz_bound(params) > self.lipschitz_cap:
            lo, hi = 0.0, 1.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if self._scaled_bound(params, mid) <= self.lipschitz_cap:
                    lo = mid
                else:
                    hi = mid
            for off, (n_in, n_out) in zip(self._offsets, self._shapes):
                params[off:off + n_in * n_out] *= lo
        return params

    def _scaled_bound(self, params: np.ndarray, gamma: float) -> float:
        total = 1.0
        for k, (w, _) in enumerate(self._matrices(params)):
            fro = gamma * float(np.linalg.norm(w))
            total *= (1.0 + fro) if k < len(self._shapes) - 1 and self._residual[k] else fro
        return total
