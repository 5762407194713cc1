"""Moment propagation for discrete-time stochastic polynomial systems by truncated Carleman linearization."""
from .errors import (
    DivergenceError,
    ModelError,
    MomentPropError,
    NumericError,
    OracleError,
    PreconditionError,
    SizeLimitError,
)
from .model import CoefficientModel, InitialStateModel, PolynomialSystemSpec, load_model, save_model
from .carleman import build_E, build_E_jk
from .initial import kron_moment, mixed_moment
from .propagation import MomentState, build_propagator, extract_moment, initial_state_for, propagate
from .bounds import build_error_coefficients, choose_J, global_bound, refined_row_bound
from .tail import safety_bound, safety_radius

__all__ = [
    "CoefficientModel",
    "DivergenceError",
    "InitialStateModel",
    "ModelError",
    "MomentPropError",
    "MomentState",
    "NumericError",
    "OracleError",
    "PolynomialSystemSpec",
    "PreconditionError",
    "SizeLimitError",
    "build_E",
    "build_E_jk",
    "build_error_coefficients",
    "build_propagator",
    "choose_J",
    "extract_moment",
    "global_bound",
    "initial_state_for",
    "kron_moment",
    "load_model",
    "mixed_moment",
    "propagate",
    "refined_row_bound",
    "safety_bound",
    "safety_radius",
    "save_model",
]
