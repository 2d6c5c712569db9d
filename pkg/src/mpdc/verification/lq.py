"""Closed forms for the linear-quadratic benchmark.

With running reward -1/2 integral |u|^2 rho and terminal reward
-1/2 integral |x|^2 rho_T, the optimal pair is

    u*(x, t)   = x / (t - T - 1)
    phi*(x, t) = |x|^2 / (2 (t - T - 1))
    V*(p, t)   = (1 / (2 (t - T - 1))) integral |x|^2 p(x) dx

and the optimal flow contracts coordinates by (T + 1 - t) / (T + 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import AnalyticLQControl


@dataclass(frozen=True)
class LQOracle:
    T: float = 1.0

    def control(self) -> AnalyticLQControl:
        return AnalyticLQControl(T=self.T, rate=1.0)

    def half_rate_field(self) -> AnalyticLQControl:
        """The transport field of the initial-perturbation example."""
        return AnalyticLQControl(T=self.T, rate=0.5)

    def u_star(self, x: np.ndarray, t) -> np.ndarray:
        return self.control()(x, t)

    def phi_star(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.sum(x ** 2, axis=1) / (2.0 * (np.asarray(t) - self.T - 1.0))

    def grad_phi_star(self, x: np.ndarray, t) -> np.ndarray:
        return self.u_star(x, t)

    def phi0_initial_derivative(self, x: np.ndarray) -> np.ndarray:
        """phi at t=0 for the source-free transport of the terminal cost."""
        x = np.atleast_2d(x)
        return -np.sum(x ** 2, axis=1) / (2.0 * (self.T + 1.0))

    def value_samples(self, points: np.ndarray, t: float) -> np.ndarray:
        """Per-sample contributions whose mean estimates V*(p, t)."""
        points = np.atleast_2d(points)
        return np.sum(points ** 2, axis=1) / (2.0 * (t - self.T - 1.0))

    def dt_value_samples(self, points: np.ndarray, t: float) -> np.ndarray:
        points = np.atleast_2d(points)
        return -np.sum(points ** 2, axis=1) / (2.0 * (t - self.T - 1.0) ** 2)

    def grad_delta_value(self, points: np.ndarray, t: float) -> np.ndarray:
        """Spatial gradient of the density derivative of V*."""
        return np.atleast_2d(points) / (t - self.T - 1.0)

    def flow_scale(self, t: float) -> float:
        return (self.T + 1.0 - t) / (self.T + 1.0)

    def optimal_value_gaussian(self, dim: int) -> float:
        """V*(p, 0) for p standard normal: -d / (2 (T + 1))."""
        return -dim / (2.0 * (self.T + 1.0))
