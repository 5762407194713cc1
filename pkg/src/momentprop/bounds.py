"""Truncation-error coefficients and the global, per-row and J-refined bounds.

The error of the truncated moment of order ``j0`` after ``t`` steps is a linear
function of the initial moments::

    e_j0(t) = E[x^[j0](t)] - x~_j0(t) = sum_j Et_j E[x0^[j]],   j = 0 .. j0 d_S^t

``Et_j`` is obtained as block row ``j0`` of the exact product
``E(j0, j0 d) E(j0 d, j0 d^2) ... E(j0 d^(t-1), j0 d^t)`` minus block row ``j0`` of
``E(N_T, N_T)^t`` (zero padded to the same columns).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .carleman import build_E
from .errors import PreconditionError, SizeLimitError
from .initial import kron_moment, moment_norm_table
from .kron import BlockLayout, check_size, stacked_dim
from .model import CoefficientModel, InitialStateModel
from .propagation import format_float

SPECTRAL_MAX_ENTRIES = 10**4

BY_ROW_NORM = "by_row_norm"
BY_MOMENT_NORM = "by_moment_norm"


def exactness_condition(j0: int, t: int, d_S: int, N_T: int) -> bool:
    """True when the truncated moment of order j0 at step t is exact."""
    return j0 * d_S**t <= N_T


@dataclass
class ErrorCoefficients:
    j0: int
    t: int
    N_T: int
    n: int
    d_S: int
    coeffs: list = field(repr=False)
    exact: bool = False

    @property
    def top(self) -> int:
        return self.j0 * self.d_S**self.t

    @property
    def rows(self) -> int:
        return self.n**self.j0

    def row(self, j: int, i: int) -> np.ndarray:
        """``v_{j,i}``: row i of ``Et_j``."""
        return self.coeffs[j][i]

    def error(self, init: InitialStateModel) -> np.ndarray:
        """The exact error vector ``e_j0(t)``."""
        out = np.zeros(self.rows)
        for j, Et in enumerate(self.coeffs):
            if Et.any():
                out += Et @ kron_moment(init, j)
        return out


def build_error_coefficients(model: CoefficientModel, j0: int, t: int, N_T: int, limit=None) -> ErrorCoefficients:
    if not 0 <= j0 <= N_T:
        raise PreconditionError(f"need 0 <= j0 <= N_T, got j0={j0}, N_T={N_T}")
    if t < 0:
        raise PreconditionError("horizon must be non-negative")
    n, d = model.n, model.d_S
    top = j0 * d**t
    check_size(f"error coefficients up to x^[{top}]", n**j0 * n**top, limit)
    if exactness_condition(j0, t, d, N_T):
        coeffs = [np.zeros((n**j0, n**j)) for j in range(top + 1)]
        return ErrorCoefficients(j0, t, N_T, n, d, coeffs, exact=True)
    D = _difference_of_products(model, j0, t, N_T, limit)
    layout = BlockLayout(n, top)
    coeffs = [D[:, layout.block_slice(j)].copy() for j in range(top + 1)]
    return ErrorCoefficients(j0, t, N_T, n, d, coeffs, exact=False)


def _difference_of_products(model, j0, t, N_T, limit=None) -> np.ndarray:
    """Block row j0 of the exact chain product minus that of the truncated power."""
    n, d = model.n, model.d_S
    top = j0 * d**t
    chain_rows = j0 * d ** max(t - 1, 0)
    rows, cols = max(N_T, chain_rows), max(N_T, top)
    try:
        # one matrix serves both products when it fits
        check_size(f"E({rows},{cols})", stacked_dim(n, rows) * stacked_dim(n, cols), limit)
        E = build_E(model, rows, cols, limit=limit).matrix
        E_chain = E_trunc = E
    except SizeLimitError:
        E_chain = build_E(model, chain_rows, top, limit=limit).matrix
        E_trunc = build_E(model, N_T, N_T, limit=limit).matrix

    def sub(a, b, E):
        return E[: stacked_dim(n, a), : stacked_dim(n, b)]

    sel = BlockLayout(n, j0).block_slice(j0)
    full = np.zeros((n**j0, stacked_dim(n, j0)))
    full[:, sel] = np.eye(n**j0)
    for s in range(t):
        full = full @ sub(j0 * d**s, j0 * d ** (s + 1), E_chain)

    trunc = np.zeros((n**j0, stacked_dim(n, N_T)))
    trunc[:, sel] = np.eye(n**j0)
    P = sub(N_T, N_T, E_trunc)
    for _ in range(t):
        trunc = trunc @ P

    width = stacked_dim(n, top)
    padded = np.zeros((n**j0, width))
    keep = min(width, trunc.shape[1])
    padded[:, :keep] = trunc[:, :keep]
    return full[:, :width] - padded


def matrix_norm(M: np.ndarray) -> tuple[float, str]:
    """Spectral norm for small blocks, Frobenius (an upper bound of it) otherwise."""
    if M.size == 0 or not M.any():
        return 0.0, "spectral" if M.size <= SPECTRAL_MAX_ENTRIES else "frobenius"
    if M.size <= SPECTRAL_MAX_ENTRIES:
        return float(np.linalg.norm(M, 2)), "spectral"
    return float(np.linalg.norm(M)), "frobenius"


def global_norm_kind(ec: ErrorCoefficients) -> str:
    kinds = {matrix_norm(Et)[1] for Et in ec.coeffs}
    return kinds.pop() if len(kinds) == 1 else "mixed"


def global_bound(ec: ErrorCoefficients, norms) -> float:
    """``xi * sum_j ||Et_j||`` with ``xi`` the largest initial-moment norm."""
    norms = np.asarray(norms, dtype=np.float64)
    if len(norms) < ec.top + 1:
        raise PreconditionError(f"moment norm table covers {len(norms)} orders, need {ec.top + 1}")
    if ec.exact:
        return 0.0
    xi = float(norms[: ec.top + 1].max())
    return xi * math.fsum(matrix_norm(Et)[0] for Et in ec.coeffs)


def _xi_outside(norms, J, top):
    rest = [norms[j] for j in range(top + 1) if j not in J]
    return float(max(rest)) if rest else 0.0


def refined_row_bound(ec: ErrorCoefficients, init: InitialStateModel, i: int, J=(), norms=None) -> float:
    """``|sum_{j in J} v_{j,i} E[x0^[j]]| + xi_J sum_{j not in J} ||v_{j,i}||``."""
    if not 0 <= i < ec.rows:
        raise IndexError(f"row {i} outside 0..{ec.rows - 1}")
    J = frozenset(int(j) for j in J)
    if any(not 0 <= j <= ec.top for j in J):
        raise PreconditionError(f"J must be a subset of 0..{ec.top}")
    if ec.exact:
        return 0.0
    if norms is None:
        norms = moment_norm_table(init, ec.top)
    inside = math.fsum(float(ec.row(j, i) @ kron_moment(init, j)) for j in sorted(J))
    xi_J = _xi_outside(norms, J, ec.top)
    outside = math.fsum(float(np.linalg.norm(ec.row(j, i))) for j in range(ec.top + 1) if j not in J)
    return abs(inside) + xi_J * outside


def choose_J(ec: ErrorCoefficients, norms, i: int, k: int, strategy: str = BY_MOMENT_NORM) -> frozenset:
    """The k indices with the largest row norm or initial-moment norm; ties to the smaller index."""
    full = ec.top + 1
    if not 0 <= k <= full:
        raise PreconditionError(f"|J| must lie in 0..{full}")
    if strategy == BY_ROW_NORM:
        score = [float(np.linalg.norm(ec.row(j, i))) for j in range(full)]
    elif strategy == BY_MOMENT_NORM:
        score = [float(norms[j]) for j in range(full)]
    else:
        raise ValueError(f"unknown J strategy {strategy!r}")
    order = sorted(range(full), key=lambda j: (-score[j], j))
    return frozenset(order[:k])


@dataclass
class BoundReport:
    j0: int
    t: int
    N_T: int
    J: tuple
    global_bound: float
    row_bounds: np.ndarray
    xi: float
    xi_J: np.ndarray
    strategy: str
    norm_kind: str
    exact: bool

    @property
    def J_size(self) -> int:
        return len(self.J[0]) if self.J else 0


def bound_report(ec: ErrorCoefficients, init: InitialStateModel, J_size: int, strategy=BY_MOMENT_NORM) -> BoundReport:
    norms = moment_norm_table(init, ec.top)
    J_size = min(J_size, ec.top + 1)
    Js, rows, xis = [], [], []
    for i in range(ec.rows):
        J = choose_J(ec, norms, i, J_size, strategy)
        Js.append(J)
        rows.append(refined_row_bound(ec, init, i, J, norms))
        xis.append(_xi_outside(norms, J, ec.top))
    return BoundReport(
        ec.j0,
        ec.t,
        ec.N_T,
        tuple(Js),
        global_bound(ec, norms),
        np.array(rows),
        float(norms.max()),
        np.array(xis),
        strategy,
        global_norm_kind(ec),
        ec.exact,
    )


BOUND_COLUMNS = ["j0", "t", "N_T", "J_size", "strategy", "row", "bound", "xi", "xi_J", "norm_kind", "exact"]


def write_bound_rows(reports, fh, header=True) -> None:
    """One ``global`` row per report followed by one row per state row."""
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(BOUND_COLUMNS)
    for r in reports:
        flag = "yes" if r.exact else "no"
        w.writerow([r.j0, r.t, r.N_T, r.J_size, r.strategy, "global", format_float(r.global_bound),
                    format_float(r.xi), format_float(r.xi), r.norm_kind, flag])
        for i, b in enumerate(r.row_bounds):
            w.writerow([r.j0, r.t, r.N_T, r.J_size, r.strategy, i, format_float(b),
                        format_float(r.xi), format_float(r.xi_J[i]), "euclidean", flag])
