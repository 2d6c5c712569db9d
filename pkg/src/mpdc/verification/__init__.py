"""Independent oracles that check the solver against closed forms and grids."""

from .lq import LQOracle
from .grid import CFLError, UniformGrid, advect
from .checks import (
    check_hjb_residual,
    check_initial_derivative,
    check_mp_fixed_point,
    check_perturbation_order,
)

__all__ = [
    "LQOracle",
    "UniformGrid",
    "advect",
    "CFLError",
    "check_perturbation_order",
    "check_initial_derivative",
    "check_hjb_residual",
    "check_mp_fixed_point",
]
