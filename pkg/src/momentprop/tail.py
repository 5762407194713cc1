"""Chebyshev bounds on ``P(||x(t) - x~_1(t)|| >= alpha)`` corrected for moment error."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bounds import BY_MOMENT_NORM, build_error_coefficients, choose_J, global_bound, refined_row_bound
from .errors import PreconditionError
from .initial import moment_norm_table
from .model import PolynomialSystemSpec
from .propagation import MomentState, extract_moment, format_float


def tail_numerator(x1, x2_diag, eps_i, eps_ii) -> float:
    """``sum_i (x2)_ii + eps_ii - max(0, |x1_i| - eps_i)^2``: a bound on the total variance."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2_diag = np.asarray(x2_diag, dtype=np.float64)
    eps_i = np.broadcast_to(np.asarray(eps_i, dtype=np.float64), x1.shape)
    eps_ii = np.broadcast_to(np.asarray(eps_ii, dtype=np.float64), x1.shape)
    if np.any(eps_i < 0) or np.any(eps_ii < 0):
        raise PreconditionError("error bounds must be non-negative")
    lower_sq = np.maximum(0.0, np.abs(x1) - eps_i) ** 2
    return math.fsum(x2_diag + eps_ii - lower_sq)


def safety_bound(x1, x2_diag, eps, eps_i, eps_ii, alpha) -> float:
    """Raw (unclamped) upper bound on the probability of leaving the alpha-ball."""
    if eps < 0:
        raise PreconditionError("error bounds must be non-negative")
    if not alpha > eps:
        raise PreconditionError(f"bound is vacuous: alpha={alpha} must exceed eps={eps}")
    return tail_numerator(x1, x2_diag, eps_i, eps_ii) / (alpha - eps) ** 2


def safety_radius(x1, x2_diag, eps, eps_i, eps_ii, p_max) -> float:
    """Smallest alpha whose bound is at most ``p_max``."""
    if not 0 < p_max <= 1:
        raise PreconditionError("p_max must lie in (0, 1]")
    num = max(0.0, tail_numerator(x1, x2_diag, eps_i, eps_ii))
    return eps + math.sqrt(num / p_max)


def clamp_probability(p: float) -> float:
    return min(1.0, max(0.0, p))


@dataclass
class SafetyInputs:
    t: int
    x1: np.ndarray
    x2_diag: np.ndarray
    eps: float
    eps_i: np.ndarray
    eps_ii: np.ndarray


def safety_inputs(
    spec: PolynomialSystemSpec,
    state: MomentState,
    J_size: int,
    strategy: str = BY_MOMENT_NORM,
    limit=None,
) -> SafetyInputs:
    """First/second truncated moments at ``state.t`` with their error bounds.

    ``eps`` is the smaller of the global bound and the Euclidean combination of
    the per-row first-moment bounds; both bound ``||x~_1 - E[x]||``.
    """
    n, t, N_T = spec.n, state.t, state.N_T
    if N_T < 2:
        raise PreconditionError("tail analysis needs second moments (N_T >= 2)")
    x1 = np.array(extract_moment(state, 1))
    x2 = extract_moment(state, 2)
    diag = np.array([n * i + i for i in range(n)])
    x2_diag = np.array(x2[diag])

    ec1 = build_error_coefficients(spec.coeffs, 1, t, N_T, limit)
    norms1 = moment_norm_table(spec.init, ec1.top)
    eps_i = np.array([
        refined_row_bound(ec1, spec.init, i, choose_J(ec1, norms1, i, min(J_size, ec1.top + 1), strategy), norms1)
        for i in range(n)
    ])
    eps = min(global_bound(ec1, norms1), float(np.linalg.norm(eps_i)))

    ec2 = build_error_coefficients(spec.coeffs, 2, t, N_T, limit)
    norms2 = moment_norm_table(spec.init, ec2.top)
    eps_ii = np.array([
        refined_row_bound(ec2, spec.init, r, choose_J(ec2, norms2, r, min(J_size, ec2.top + 1), strategy), norms2)
        for r in diag
    ])
    return SafetyInputs(t, x1, x2_diag, eps, eps_i, eps_ii)


TAIL_COLUMNS = ["t", "alpha", "bound_raw", "bound_clamped", "eps", "numerator"]


def write_tail_rows(rows, fh, extra_columns=()) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TAIL_COLUMNS + list(extra_columns))
    for r in rows:
        w.writerow([format_float(v) if isinstance(v, float) else v for v in r])
