"""mpdc: maximum-principle control of probability densities.

Finds a time-varying control vector field maximizing a running-plus-terminal
reward for a cloud of agents transported by the field, and ships the
closed-form / grid oracles used to verify the solver.
"""

from .autodiff import Tape, Var
from .dynamics import (
    AnalyticLQControl,
    Gaussian,
    ParticleEnsemble,
    Trajectory,
    TruncExpGaussian,
    rollout,
    rollout_with_param_grad,
    sample_initial,
)
from .estimator import DensityController
from .fields import FieldNet
from .optim import AdamState, adam_step
from .rewards import (
    ControlEnergy,
    Cylinder,
    DoubleWedge,
    ObstaclePenalty,
    PairRepulsion,
    QuadraticTerminal,
    RewardSpec,
)
from .solver import ControlProblem, SolverConfig, SolverState, run, stepsize_bound

__all__ = [
    "Tape",
    "Var",
    "FieldNet",
    "AdamState",
    "adam_step",
    "ParticleEnsemble",
    "Trajectory",
    "Gaussian",
    "TruncExpGaussian",
    "AnalyticLQControl",
    "sample_initial",
    "rollout",
    "rollout_with_param_grad",
    "RewardSpec",
    "ControlEnergy",
    "PairRepulsion",
    "ObstaclePenalty",
    "Cylinder",
    "DoubleWedge",
    "QuadraticTerminal",
    "ControlProblem",
    "SolverConfig",
    "SolverState",
    "run",
    "stepsize_bound",
    "DensityController",
]

__version__ = "0.1.0"
