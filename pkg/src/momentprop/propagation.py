"""The truncated moment system ``y(t+1) = E(N_T, N_T) y(t)``.

Two engines share one interface:

* :class:`TruncatedPropagator` keeps the dense Kronecker-layout matrix ``E(N_T, N_T)``.
* :class:`MonomialPropagator` stores the same linear map on the space of
  monomials of degree <= N_T.  Truncated moment vectors stay symmetric under
  permutation of Kronecker factors, so both engines give the same ``x~_j(t)``; the
  monomial one is polynomial rather than exponential in ``n`` and is what makes
  the six-state vehicle model usable at N_T = 8.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .carleman import ExpectedBlockMatrix, _ExponentIndex, build_E, cached_build_E
from .errors import DivergenceError
from .initial import kron_moment, mixed_moment
from .kron import BlockLayout, check_size, exponent_counts, stacked_dim, stacked_view
from .model import CoefficientModel, InitialStateModel

KRONECKER = "kronecker"
MONOMIAL = "monomial"


@dataclass(frozen=True)
class MomentState:
    t: int
    y: np.ndarray
    n: int
    N_T: int
    basis: str = KRONECKER

    def __post_init__(self):
        self.y.setflags(write=False)


# --------------------------------------------------------------------------
# monomial bookkeeping


class MonomialBasis:
    """Exponent vectors of all monomials in n variables of degree <= N, graded order."""

    def __init__(self, n: int, N: int):
        from .initial import multisets

        self.n, self.N = n, N
        self.alphas = [a for d in range(N + 1) for a in multisets(n, d)]
        self.index = {a: i for i, a in enumerate(self.alphas)}
        self.degree = np.array([sum(a) for a in self.alphas])

    def __len__(self):
        return len(self.alphas)

    def flat_to_basis(self, j: int) -> np.ndarray:
        """Basis index of every entry of the n^j Kronecker block."""
        if j == 0:
            return np.zeros(1, dtype=np.int64)
        counts = exponent_counts(self.n, j)
        uniq, inverse = np.unique(counts, axis=0, return_inverse=True)
        lookup = np.array([self.index[tuple(int(v) for v in row)] for row in uniq])
        return lookup[np.ravel(inverse)]

    def shift_map(self, mu) -> np.ndarray:
        """``out[b] = index(alpha_b + mu)`` or -1 when the degree exceeds N."""
        out = np.full(len(self), -1, dtype=np.int64)
        for i, a in enumerate(self.alphas):
            key = tuple(x + y for x, y in zip(a, mu))
            out[i] = self.index.get(key, -1)
        return out


# --------------------------------------------------------------------------
# engines


@dataclass
class TruncatedPropagator:
    E: ExpectedBlockMatrix
    N_T: int
    model_hash: str
    basis: str = KRONECKER

    def __post_init__(self):
        if self.E.N != self.N_T or self.E.M != self.N_T:
            raise ValueError("propagator needs a square E(N_T, N_T)")

    @classmethod
    def build(cls, model: CoefficientModel, N_T: int, cache_dir=None, threads=1, limit=None):
        if cache_dir is None:
            E = build_E(model, N_T, N_T, threads=threads, limit=limit)
        else:
            E = cached_build_E(model, N_T, N_T, cache_dir=cache_dir, threads=threads, limit=limit)
        return cls(E, N_T, model.content_hash())

    @property
    def n(self):
        return self.E.n

    @property
    def matrix(self) -> np.ndarray:
        return self.E.matrix

    @property
    def layout(self) -> BlockLayout:
        return BlockLayout(self.n, self.N_T)


@dataclass
class MonomialPropagator:
    matrix: np.ndarray
    monomials: MonomialBasis
    N_T: int
    model_hash: str
    basis: str = MONOMIAL

    @property
    def n(self):
        return self.monomials.n

    @classmethod
    def build(cls, model: CoefficientModel, N_T: int, limit=None):
        n = model.n
        mb = MonomialBasis(n, N_T)
        size = len(mb)
        check_size(f"monomial propagator (N_T={N_T})", size * size, limit)
        gidx = _ExponentIndex(model.params, N_T)
        check_size("monomial work array", size * gidx.size, limit)

        # each component of the update as {(mu, param or None): coefficient}
        updates = [dict() for _ in range(n)]
        for i in range(model.d_S + 1):
            counts = exponent_counts(n, i)
            for p, C in model.terms(i):
                rows, cols = np.nonzero(C)
                for r, col in zip(rows, cols):
                    key = (tuple(int(v) for v in counts[col]), p)
                    updates[r][key] = updates[r].get(key, 0.0) + C[r, col]
        shifts = {}
        for upd in updates:
            for mu, _ in upd:
                if mu not in shifts:
                    m = mb.shift_map(mu)
                    src = np.flatnonzero(m >= 0)
                    shifts[mu] = (src, m[src])
        terms = [
            [(shifts[mu], p, coef) for (mu, p), coef in sorted(upd.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])) if coef != 0.0]
            for upd in updates
        ]

        def times_component(poly, c):
            out = np.zeros_like(poly)
            for (src, dst), p, coef in terms[c]:
                if p is None:
                    out[dst] += coef * poly[src]
                else:
                    gs, gd = gidx.shift[p]
                    out[np.ix_(dst, gd)] += coef * poly[np.ix_(src, gs)]
            return out

        T = np.zeros((size, size))
        root = np.zeros((size, gidx.size))
        root[0, 0] = 1.0

        # depth-first over multisets c_1 <= c_2 <= ... keeps only one chain in memory
        stack = [((0,) * n, 0, root)]
        while stack:
            alpha, last, poly = stack.pop()
            T[mb.index[alpha]] = poly @ gidx.moments
            if sum(alpha) == N_T:
                continue
            for c in range(n - 1, last - 1, -1):
                child = alpha[:c] + (alpha[c] + 1,) + alpha[c + 1 :]
                stack.append((child, c, times_component(poly, c)))
        T.setflags(write=False)
        return cls(T, mb, N_T, model.content_hash())


def build_propagator(model: CoefficientModel, N_T: int, basis="auto", cache_dir=None, threads=1, limit=None):
    """Dense Kronecker engine when it fits the size limit, monomial engine otherwise."""
    if basis == KRONECKER:
        return TruncatedPropagator.build(model, N_T, cache_dir=cache_dir, threads=threads, limit=limit)
    if basis == MONOMIAL:
        return MonomialPropagator.build(model, N_T, limit=limit)
    if basis != "auto":
        raise ValueError(f"unknown basis {basis!r}")
    from .kron import get_size_limit

    allowed = get_size_limit() if limit is None else limit
    if stacked_dim(model.n, N_T) ** 2 <= allowed:
        return TruncatedPropagator.build(model, N_T, cache_dir=cache_dir, threads=threads, limit=limit)
    return MonomialPropagator.build(model, N_T, limit=limit)


# --------------------------------------------------------------------------
# operations


def init_state(init: InitialStateModel, N_T: int, basis: str = KRONECKER) -> MomentState:
    """``y~(0) = [1, E[x0], ..., E[x0^[N_T]]]`` in the requested basis."""
    if basis == KRONECKER:
        y = np.concatenate([kron_moment(init, j) for j in range(N_T + 1)])
    elif basis == MONOMIAL:
        mb = MonomialBasis(init.n, N_T)
        y = np.array([mixed_moment(init, a) for a in mb.alphas])
    else:
        raise ValueError(f"unknown basis {basis!r}")
    return MomentState(0, y, init.n, N_T, basis)


def initial_state_for(p, init: InitialStateModel) -> MomentState:
    return init_state(init, p.N_T, p.basis)


def step(p, s: MomentState) -> MomentState:
    if s.basis != p.basis or s.N_T != p.N_T or s.n != p.n:
        raise ValueError("moment state does not match the propagator")
    y = p.matrix @ s.y
    # row 0 of E is exactly [1, 0, ..., 0]
    y[0] = 1.0
    if not np.all(np.isfinite(y)):
        raise DivergenceError(s.t + 1)
    return MomentState(s.t + 1, y, s.n, s.N_T, s.basis)


def iter_propagate(p, s0: MomentState, t: int):
    """Yield states s0, s1, ..., st; stops by raising DivergenceError."""
    s = s0
    yield s
    for _ in range(t):
        s = step(p, s)
        yield s


def propagate(p, s0: MomentState, t: int) -> list[MomentState]:
    if t < 0:
        raise ValueError("horizon must be non-negative")
    out = []
    try:
        for s in iter_propagate(p, s0, t):
            out.append(s)
    except DivergenceError as exc:
        raise DivergenceError(exc.step, out, f"non-finite moments at step {exc.step}") from None
    return out


def extract_moment(s: MomentState, j: int) -> np.ndarray:
    """Block ``x~_j(t)`` in Kronecker layout (length n^j)."""
    if not 0 <= j <= s.N_T:
        raise IndexError(f"moment order {j} outside 0..{s.N_T}")
    if s.basis == KRONECKER:
        return stacked_view(s.y, BlockLayout(s.n, s.N_T), j)
    return s.y[_flat_lookup(s.n, s.N_T, j)]


_lookup_cache: dict = {}


def _flat_lookup(n, N_T, j):
    key = (n, N_T, j)
    if key not in _lookup_cache:
        _lookup_cache[key] = MonomialBasis(n, N_T).flat_to_basis(j)
    return _lookup_cache[key]


def write_trajectory_csv(states, blocks, fh, status=None) -> None:
    """Rows ``t, block, index, value``; an optional trailing status row."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "block", "index", "value"])
    for s in states:
        for j in blocks:
            for idx, v in enumerate(extract_moment(s, j)):
                w.writerow([s.t, j, idx, format_float(v)])
    if status is not None:
        w.writerow(["#status", status, "", ""])


def format_float(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"
