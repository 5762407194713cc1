"""Moments ``E[x0^[j]]`` of the initial state.

Component expressions are expanded into sums of separable terms
``coef * prod_s g_s(s)`` where each ``g_s`` is a power of source ``s`` times trig
factors of that source.  Source independence turns the expectation of every term
into a product of one-dimensional integrals.
"""
from __future__ import annotations

import math
import threading
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import NumericError
from .kron import check_size, exponent_counts
from .model import (
    Add,
    Const,
    Finite,
    Gaussian,
    InitialStateModel,
    Mul,
    Point,
    Pow,
    Source,
    Trig,
    TruncatedGaussian,
    Uniform,
    raw_moment,
)

QUAD_AGREEMENT = 1e-10
MAX_DOUBLINGS = 5

# a term key is a sorted tuple of (source, power, trig factors) per source


def _mul_keys(a, b):
    merged = {}
    for s, p, trig in a + b:
        p0, t0 = merged.get(s, (0, ()))
        merged[s] = (p0 + p, tuple(sorted(t0 + trig)))
    return tuple((s, p, t) for s, (p, t) in sorted(merged.items()))


def _mul_poly(a: dict, b: dict) -> dict:
    out: dict = {}
    for ka, ca in a.items():
        for kb, cb in b.items():
            key = _mul_keys(ka, kb)
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def expand(expr) -> dict:
    """Separable-term expansion ``{term key: coefficient}`` of an expression."""
    if isinstance(expr, Const):
        return {(): float(expr.value)}
    if isinstance(expr, Source):
        return {((expr.index, 1, ()),): 1.0}
    if isinstance(expr, Trig):
        return {((expr.source, 0, ((expr.func, float(expr.scale), float(expr.offset)),)),): 1.0}
    if isinstance(expr, Add):
        out: dict = {}
        for arg in expr.args:
            for k, c in expand(arg).items():
                out[k] = out.get(k, 0.0) + c
        return out
    if isinstance(expr, Mul):
        out = {(): 1.0}
        for arg in expr.args:
            out = _mul_poly(out, expand(arg))
        return out
    if isinstance(expr, Pow):
        base = expand(expr.base)
        out = {(): 1.0}
        for _ in range(expr.exponent):
            out = _mul_poly(out, base)
        return out
    raise TypeError(f"unsupported expression node {expr!r}")


@lru_cache(maxsize=64)
def _legendre(m):
    return special.roots_legendre(m)


@lru_cache(maxsize=64)
def _hermite(m):
    z, w = special.roots_hermitenorm(m)
    return z, w / math.sqrt(2 * math.pi)


@lru_cache(maxsize=256)
def _rule(dist, m):
    """Nodes and probability weights of an m-point Gauss rule for ``dist``."""
    if isinstance(dist, Gaussian):
        z, w = _hermite(m)
        return dist.mean + dist.stddev * z, w
    if isinstance(dist, Uniform):
        z, w = _legendre(m)
        half = (dist.hi - dist.lo) / 2
        return dist.lo + half * (z + 1), w / 2
    if isinstance(dist, TruncatedGaussian):
        # beyond 12 sigma the density is below e^-72
        lo = max(dist.lo, dist.mean - 12 * dist.stddev)
        hi = min(dist.hi, dist.mean + 12 * dist.stddev)
        z, w = _legendre(m)
        half = (hi - lo) / 2
        x = lo + half * (z + 1)
        return x, w * half * dist.pdf(x)
    raise TypeError(f"no quadrature rule for {dist!r}")


def _integrand(x, power, trig):
    val = x**power if power else np.ones_like(x)
    for func, scale, offset in trig:
        arg = scale * x + offset
        val = val * (np.sin(arg) if func == "sin" else np.cos(arg))
    return val


@lru_cache(maxsize=None)
def source_expectation(dist, power: int, trig: tuple = ()) -> float:
    """``E[s^power * prod trig(s)]`` for a single source distribution."""
    if isinstance(dist, (Point, Finite)):
        vals, probs = (dist.values, dist.probabilities) if isinstance(dist, Finite) else ((dist.value,), (1.0,))
        x = np.asarray(vals, dtype=np.float64)
        return float(math.fsum(np.asarray(probs) * _integrand(x, power, trig)))
    if not trig and isinstance(dist, (Gaussian, Uniform)):
        return raw_moment(dist, power)
    # power-of-two node counts keep the number of distinct rules small
    m = 1 << (power // 2 + 8 + 2 * len(trig) - 1).bit_length()
    x, w = _rule(dist, m)
    prev = float(w @ _integrand(x, power, trig))
    for _ in range(MAX_DOUBLINGS):
        m *= 2
        x, w = _rule(dist, m)
        cur = float(w @ _integrand(x, power, trig))
        diff = abs(cur - prev)
        if diff <= QUAD_AGREEMENT * max(1.0, abs(cur)):
            return cur
        prev = cur
    raise NumericError(
        f"quadrature for E[s^{power} {trig}] under {dist!r} did not settle (last change {diff:.3g})",
        achieved=diff,
    )


class _MomentEngine:
    def __init__(self, init: InitialStateModel):
        self.init = init
        self._terms = [expand(c) for c in init.components]
        self._lock = threading.Lock()
        self._products: dict = {(0,) * init.n: {(): 1.0}}
        self._values: dict = {}

    def _product(self, alpha):
        with self._lock:
            hit = self._products.get(alpha)
        if hit is not None:
            return hit
        c = max(i for i, a in enumerate(alpha) if a)
        parent = alpha[:c] + (alpha[c] - 1,) + alpha[c + 1 :]
        out = _mul_poly(self._product(parent), self._terms[c])
        with self._lock:
            self._products[alpha] = out
        return out

    def mixed(self, alpha) -> float:
        alpha = tuple(int(a) for a in alpha)
        with self._lock:
            hit = self._values.get(alpha)
        if hit is not None:
            return hit
        total = []
        for key, coef in self._product(alpha).items():
            val = coef
            for s, power, trig in key:
                val *= source_expectation(self.init.sources[s], power, trig)
            total.append(val)
        value = math.fsum(total)
        with self._lock:
            self._values[alpha] = value
        return value


@lru_cache(maxsize=32)
def _engine(init: InitialStateModel) -> _MomentEngine:
    return _MomentEngine(init)


def mixed_moment(init: InitialStateModel, alpha) -> float:
    """``E[prod_c x0_c^alpha_c]``."""
    if len(alpha) != init.n:
        raise ValueError(f"exponent vector has length {len(alpha)}, expected {init.n}")
    return _engine(init).mixed(alpha)


def kron_moment(init: InitialStateModel, j: int, limit=None) -> np.ndarray:
    """``E[x0^[j]]`` as a flat vector of length n^j.

    Entries sharing an exponent multiset are computed once and broadcast.
    """
    if j < 0:
        raise ValueError("moment order must be non-negative")
    n = init.n
    check_size(f"E[x0^[{j}]]", n**j, limit)
    if j == 0:
        return np.ones(1)
    counts = exponent_counts(n, j)
    uniq, inverse = np.unique(counts, axis=0, return_inverse=True)
    vals = np.array([mixed_moment(init, tuple(row)) for row in uniq])
    return vals[np.ravel(inverse)]


def multisets(n: int, j: int):
    """Exponent vectors of length n with total j (reverse lexicographic)."""
    if n == 1:
        yield (j,)
        return
    for first in range(j, -1, -1):
        for rest in multisets(n - 1, j - first):
            yield (first,) + rest


def multiplicity(alpha) -> int:
    """How many Kronecker positions share the exponent vector ``alpha``."""
    out = math.factorial(sum(alpha))
    for a in alpha:
        out //= math.factorial(a)
    return out


def moment_norm(init: InitialStateModel, j: int) -> float:
    """Euclidean norm of ``E[x0^[j]]`` without materialising the n^j vector."""
    sq = math.fsum(multiplicity(a) * mixed_moment(init, a) ** 2 for a in multisets(init.n, j))
    return math.sqrt(sq)


def moment_norm_table(init: InitialStateModel, j_max: int) -> np.ndarray:
    return np.array([moment_norm(init, j) for j in range(j_max + 1)])
