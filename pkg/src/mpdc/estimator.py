"""Estimator front end so the solver composes with scikit-learn pipelines.

``DensityController.fit(X)`` treats the rows of X as samples of the initial
agent density, learns the reward-maximizing control field, and afterwards
``predict`` evaluates the field while ``transform`` pushes points to their
terminal positions under it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dynamics import Gaussian, ParticleEnsemble, rollout
from .rewards import ControlEnergy, QuadraticTerminal, RewardSpec
from .solver import ControlProblem, SolverConfig, estimate_total_reward, run


class DensityController(TransformerMixin, BaseEstimator):
    """Maximum-principle density control with a fit/predict surface.

    Parameters
    ----------
    rewards : RewardSpec or None
        Running and terminal rewards; None means control energy plus the
        quadratic terminal cost toward the origin.
    T : float
        Time horizon.
    solver : SolverConfig or None
        Numerical budgets; None uses the defaults.
    seed : int
        Master seed (overrides the one inside ``solver``).
    """

    def __init__(self, rewards: RewardSpec | None = None, T: float = 1.0,
                 solver: SolverConfig | None = None, seed: int = 0):
        self.rewards = rewards
        self.T = T
        self.solver = solver
        self.seed = seed

    def _resolved(self, d: int):
        rewards = self.rewards
        if rewards is None:
            rewards = RewardSpec(running=(ControlEnergy(0.5),),
                                 terminal=QuadraticTerminal(center=np.zeros(d),
                                                            weight=0.5))
        base = self.solver if self.solver is not None else SolverConfig()
        cfg = SolverConfig(**{**base.__dict__, "seed": self.seed})
        return rewards, cfg

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        rewards, cfg = self._resolved(d)
        if rewards.terminal.center.shape != (d,):
            raise ValueError(
                f"terminal center has dimension {rewards.terminal.center.shape[0]}, "
                f"but X has {d} features")
        # moment-matched Gaussian stands in for the initial density where the
        # solver needs one (collocation reference); particles carry the rest
        surrogate = Gaussian(mean=X.mean(axis=0),
                             var=max(float(X.var(axis=0).mean()), 1e-6))
        problem = ControlProblem(rewards=rewards, initial=surrogate,
                                 T=float(self.T), dim=d)
        ens = ParticleEnsemble.uniform(X)
        state = run(problem, cfg, ens0=ens, ens_eval=ens)
        self.n_features_in_ = d
        self.problem_ = problem
        self.config_ = cfg
        self.state_ = state
        self.net_ = state.net
        self.params_ = state.params[-1]
        self.history_ = state.records
        return self

    def predict(self, X, t: float = 0.0) -> np.ndarray:
        """Control vectors at the given points and time."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        return self.net_.eval(self.params_, X, t)

    def transform(self, X) -> np.ndarray:
        """Terminal positions of the points under the fitted control."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        traj = rollout(ParticleEnsemble.uniform(X),
                       self.net_.evaluator(self.params_), self.problem_.T,
                       self.config_.dt, (0.0, self.problem_.T))
        return traj.states[-1]

    def score(self, X, y=None) -> float:
        """Estimated total reward of the fitted control started from X."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        reward, _, _ = estimate_total_reward(
            self.problem_, self.net_.evaluator(self.params_), self.config_,
            ParticleEnsemble.uniform(X), pair_seed=self.seed)
        return reward
