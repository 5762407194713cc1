"""Stochastic polynomial systems ``x(t+1) = sum_i F_i(t) x^[i](t)``.

Each coefficient matrix is affine in a per-step parameter vector ``w(t)``::

    F_i(t) = C[i, const] + sum_p w_p(t) * C[i, p]

with fresh, independent, identically distributed draws of ``w`` at every step.
The initial state is a vector of expressions over independent scalar sources.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .errors import ModelParseError, NumericError, ProbabilityError, ShapeMismatchError

QUAD_ABS_TOL = 1e-12


# --------------------------------------------------------------------------
# scalar distributions


@dataclass(frozen=True)
class Point:
    value: float
    kind = "point"

    def ppf(self, u):
        return np.full(np.shape(u), float(self.value))

    def support(self):
        return (float(self.value),), (1.0,)

    def to_dict(self):
        return {"kind": "point", "value": self.value}


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float
    kind = "uniform"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ModelParseError(f"uniform needs lo < hi, got [{self.lo}, {self.hi}]")

    def ppf(self, u):
        return self.lo + (self.hi - self.lo) * np.asarray(u)

    def to_dict(self):
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Gaussian:
    mean: float
    stddev: float
    kind = "gaussian"

    def __post_init__(self):
        if not self.stddev > 0:
            raise ModelParseError(f"gaussian needs stddev > 0, got {self.stddev}")

    def ppf(self, u):
        return self.mean + self.stddev * special.ndtri(np.asarray(u))

    def to_dict(self):
        return {"kind": "gaussian", "mean": self.mean, "stddev": self.stddev}


@dataclass(frozen=True)
class TruncatedGaussian:
    mean: float
    stddev: float
    lo: float
    hi: float
    kind = "truncated_gaussian"

    def __post_init__(self):
        if not self.stddev > 0:
            raise ModelParseError(f"truncated_gaussian needs stddev > 0, got {self.stddev}")
        if not self.lo < self.hi:
            raise ModelParseError(f"truncated_gaussian needs lo < hi, got [{self.lo}, {self.hi}]")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ModelParseError("truncated_gaussian bounds must be finite")

    @property
    def _cdf_bounds(self):
        a = special.ndtr((self.lo - self.mean) / self.stddev)
        b = special.ndtr((self.hi - self.mean) / self.stddev)
        return a, b

    def pdf(self, x):
        a, b = self._cdf_bounds
        z = (np.asarray(x) - self.mean) / self.stddev
        return np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.stddev * (b - a))

    def ppf(self, u):
        a, b = self._cdf_bounds
        x = self.mean + self.stddev * special.ndtri(a + np.asarray(u) * (b - a))
        return np.clip(x, self.lo, self.hi)

    def to_dict(self):
        return {
            "kind": "truncated_gaussian",
            "mean": self.mean,
            "stddev": self.stddev,
            "lo": self.lo,
            "hi": self.hi,
        }


@dataclass(frozen=True)
class Finite:
    values: tuple
    probabilities: tuple
    kind = "finite"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
        if len(self.values) == 0 or len(self.values) != len(self.probabilities):
            raise ModelParseError("finite distribution needs equally many values and probabilities")
        if any(p < 0 for p in self.probabilities):
            raise ProbabilityError("finite distribution has a negative probability")
        total = math.fsum(self.probabilities)
        if abs(total - 1.0) > 1e-12:
            raise ProbabilityError(f"probabilities sum to {total!r}, expected 1")

    def ppf(self, u):
        cum = np.cumsum(self.probabilities)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, np.asarray(u), side="right")
        return np.asarray(self.values)[np.minimum(idx, len(self.values) - 1)]

    def support(self):
        return self.values, self.probabilities

    def to_dict(self):
        return {
            "kind": "finite",
            "values": list(self.values),
            "probabilities": list(self.probabilities),
        }


ScalarDistribution = Point | Uniform | Gaussian | TruncatedGaussian | Finite

_DIST_FIELDS = {
    "point": (Point, ("value",)),
    "uniform": (Uniform, ("lo", "hi")),
    "gaussian": (Gaussian, ("mean", "stddev")),
    "truncated_gaussian": (TruncatedGaussian, ("mean", "stddev", "lo", "hi")),
    "finite": (Finite, ("values", "probabilities")),
}


def distribution_from_dict(record, where="distribution") -> ScalarDistribution:
    if not isinstance(record, dict) or "kind" not in record:
        raise ModelParseError("distribution record needs a 'kind'", field=where)
    kind = record["kind"]
    if kind not in _DIST_FIELDS:
        raise ModelParseError(f"unknown distribution kind {kind!r}", field=where)
    cls, names = _DIST_FIELDS[kind]
    missing = [k for k in names if k not in record]
    if missing:
        raise ModelParseError(f"{kind} record is missing {missing}", field=where)
    args = [record[k] for k in names]
    if kind == "finite":
        args = [tuple(a) for a in args]
    else:
        args = [float(a) for a in args]
    try:
        return cls(*args)
    except ProbabilityError:
        raise
    except ModelParseError as exc:
        raise ModelParseError(str(exc), field=where) from None


def is_finite_valued(d) -> bool:
    return isinstance(d, (Point, Finite))


@lru_cache(maxsize=None)
def raw_moment(d: ScalarDistribution, k: int) -> float:
    """E[w^k]. Closed forms except for the truncated gaussian (adaptive quadrature)."""
    if k < 0:
        raise ValueError("moment order must be non-negative")
    if k == 0:
        return 1.0
    if isinstance(d, Point):
        return float(d.value) ** k
    if isinstance(d, Uniform):
        a, b = d.lo, d.hi
        return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))
    if isinstance(d, Gaussian):
        # m_k = mu m_{k-1} + (k-1) s^2 m_{k-2}
        prev, cur = 1.0, d.mean
        for i in range(2, k + 1):
            prev, cur = cur, d.mean * cur + (i - 1) * d.stddev**2 * prev
        return cur
    if isinstance(d, Finite):
        return math.fsum(p * v**k for v, p in zip(d.values, d.probabilities))
    if isinstance(d, TruncatedGaussian):
        return _truncated_gaussian_moment(d, k)
    raise TypeError(f"not a distribution: {d!r}")


def _truncated_gaussian_moment(d: TruncatedGaussian, k: int) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(
                lambda x: x**k * d.pdf(x),
                d.lo,
                d.hi,
                points=[min(max(d.mean, d.lo), d.hi)],
                epsabs=QUAD_ABS_TOL,
                epsrel=0.0,
                limit=500,
            )
        except integrate.IntegrationWarning as exc:
            raise NumericError(f"quadrature for E[w^{k}] did not converge: {exc}") from None
    if err > QUAD_ABS_TOL:
        raise NumericError(f"quadrature for E[w^{k}] reached only {err:.3g}", achieved=err)
    return val


# --------------------------------------------------------------------------
# initial-state expressions


class Expr:
    def sources(self) -> set[int]:
        raise NotImplementedError

    def evaluate(self, s: np.ndarray) -> np.ndarray:
        """Evaluate on source samples ``s`` of shape (samples, num_sources)."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def sources(self):
        return set()

    def evaluate(self, s):
        return np.full(s.shape[0], float(self.value))

    def to_dict(self):
        return {"kind": "const", "value": self.value}


@dataclass(frozen=True)
class Source(Expr):
    index: int

    def sources(self):
        return {self.index}

    def evaluate(self, s):
        return s[:, self.index].astype(np.float64)

    def to_dict(self):
        return {"kind": "source", "index": self.index}


@dataclass(frozen=True)
class Add(Expr):
    args: tuple

    def sources(self):
        return set().union(*(a.sources() for a in self.args))

    def evaluate(self, s):
        out = np.zeros(s.shape[0])
        for a in self.args:
            out = out + a.evaluate(s)
        return out

    def to_dict(self):
        return {"kind": "add", "args": [a.to_dict() for a in self.args]}


@dataclass(frozen=True)
class Mul(Expr):
    args: tuple

    def sources(self):
        return set().union(*(a.sources() for a in self.args))

    def evaluate(self, s):
        out = np.ones(s.shape[0])
        for a in self.args:
            out = out * a.evaluate(s)
        return out

    def to_dict(self):
        return {"kind": "mul", "args": [a.to_dict() for a in self.args]}


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def sources(self):
        return self.base.sources()

    def evaluate(self, s):
        return self.base.evaluate(s) ** self.exponent

    def to_dict(self):
        return {"kind": "pow", "base": self.base.to_dict(), "exponent": self.exponent}


@dataclass(frozen=True)
class Trig(Expr):
    """``sin(scale*s + offset)`` or ``cos(...)`` of a single source."""

    func: str
    source: int
    scale: float = 1.0
    offset: float = 0.0

    def sources(self):
        return {self.source}

    def evaluate(self, s):
        arg = self.scale * s[:, self.source] + self.offset
        return np.sin(arg) if self.func == "sin" else np.cos(arg)

    def to_dict(self):
        return {"kind": self.func, "source": self.source, "scale": self.scale, "offset": self.offset}


def expr_from_dict(node, where="expr") -> Expr:
    if not isinstance(node, dict) or "kind" not in node:
        raise ModelParseError("expression node needs a 'kind'", field=where)
    kind = node["kind"]
    try:
        if kind == "const":
            return Const(float(node["value"]))
        if kind == "source":
            return Source(int(node["index"]))
        if kind in ("add", "mul"):
            args = tuple(expr_from_dict(a, f"{where}.args[{i}]") for i, a in enumerate(node["args"]))
            if not args:
                raise ModelParseError(f"{kind} needs at least one argument", field=where)
            return (Add if kind == "add" else Mul)(args)
        if kind == "pow":
            exponent = node["exponent"]
            if int(exponent) != exponent or exponent < 0:
                raise ModelParseError("pow exponent must be a non-negative integer", field=where)
            return Pow(expr_from_dict(node["base"], f"{where}.base"), int(exponent))
        if kind in ("sin", "cos"):
            return Trig(kind, int(node["source"]), float(node.get("scale", 1.0)), float(node.get("offset", 0.0)))
    except KeyError as exc:
        raise ModelParseError(f"{kind} node is missing {exc}", field=where) from None
    raise ModelParseError(f"unknown expression kind {kind!r}", field=where)


@dataclass(frozen=True)
class InitialStateModel:
    sources: tuple
    components: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "components", tuple(self.components))
        for c, expr in enumerate(self.components):
            bad = [i for i in expr.sources() if not 0 <= i < len(self.sources)]
            if bad:
                raise ModelParseError(
                    f"component {c} references unknown sources {sorted(bad)}",
                    field=f"initial_state.components[{c}]",
                )

    @property
    def n(self) -> int:
        return len(self.components)

    def evaluate(self, source_samples: np.ndarray) -> np.ndarray:
        """Map source samples (samples, m) to states (samples, n)."""
        return np.column_stack([c.evaluate(source_samples) for c in self.components])

    def to_dict(self):
        return {
            "sources": [s.to_dict() for s in self.sources],
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def independent(cls, dists) -> "InitialStateModel":
        """Each state component is its own independent source."""
        dists = tuple(dists)
        return cls(dists, tuple(Source(i) for i in range(len(dists))))


# --------------------------------------------------------------------------
# coefficient model and system


@dataclass(eq=False)
class CoefficientModel:
    n: int
    d_S: int
    params: tuple
    constants: list
    linear: list = field(default_factory=list)

    def __post_init__(self):
        self.params = tuple(self.params)
        P = len(self.params)
        if self.n < 1:
            raise ShapeMismatchError("state dimension n must be positive")
        if self.d_S < 0:
            raise ShapeMismatchError("degree d_S must be non-negative")
        if len(self.constants) != self.d_S + 1:
            raise ShapeMismatchError(f"expected {self.d_S + 1} constant matrices F_0..F_{self.d_S}")
        if not self.linear:
            self.linear = [{} for _ in range(self.d_S + 1)]
        if len(self.linear) != self.d_S + 1:
            raise ShapeMismatchError(f"expected {self.d_S + 1} linear-term maps")
        consts = []
        for i, C in enumerate(self.constants):
            consts.append(self._shaped(C, i, "const"))
        self.constants = consts
        lin = []
        for i, terms in enumerate(self.linear):
            out = {}
            for p, C in terms.items():
                p = int(p)
                if not 0 <= p < P:
                    raise ShapeMismatchError(f"F_{i}: linear term refers to unknown parameter {p}")
                out[p] = self._shaped(C, i, f"linear[{p}]")
            lin.append(dict(sorted(out.items())))
        self.linear = lin
        if not any(np.any(C) for C in self.constants) and not any(
            np.any(C) for terms in self.linear for C in terms.values()
        ):
            raise ShapeMismatchError("all coefficient matrices are zero")

    def _shaped(self, C, i, what):
        C = np.array(C, dtype=np.float64)
        if C.ndim == 1 and self.n == 1:
            C = C.reshape(1, -1)
        if C.ndim == 0:
            C = C.reshape(1, 1)
        expected = (self.n, self.n**i)
        if C.shape != expected:
            raise ShapeMismatchError(f"F_{i} ({what}) has shape {C.shape}, expected {expected}")
        if not np.all(np.isfinite(C)):
            raise ShapeMismatchError(f"F_{i} ({what}) has non-finite entries")
        C.setflags(write=False)
        return C

    @property
    def num_params(self) -> int:
        return len(self.params)

    def terms(self, i):
        """Pairs (param index or None, matrix) of F_i; None marks the constant part."""
        out = [(None, self.constants[i])]
        out.extend(self.linear[i].items())
        return out

    def F(self, i, w) -> np.ndarray:
        out = self.constants[i].copy()
        for p, C in self.linear[i].items():
            out += w[p] * C
        return out

    def is_deterministic(self) -> bool:
        return all(not terms for terms in self.linear) or all(
            isinstance(d, Point) for d in self.params
        )

    def to_dict(self):
        return {
            "n": self.n,
            "d_S": self.d_S,
            "parameters": [d.to_dict() for d in self.params],
            "F": [
                {
                    "const": self.constants[i].tolist(),
                    "linear": {str(p): C.tolist() for p, C in self.linear[i].items()},
                }
                for i in range(self.d_S + 1)
            ],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(eq=False)
class PolynomialSystemSpec:
    coeffs: CoefficientModel
    init: InitialStateModel
    name: str = "model"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.coeffs.n != self.init.n:
            raise ShapeMismatchError(
                f"coefficient dimension {self.coeffs.n} != {self.init.n} initial components"
            )

    @property
    def n(self):
        return self.coeffs.n

    @property
    def d_S(self):
        return self.coeffs.d_S

    def to_dict(self):
        d = {"name": self.name}
        d.update(self.coeffs.to_dict())
        d["initial_state"] = self.init.to_dict()
        if self.metadata:
            d["metadata"] = self.metadata
        return d


# --------------------------------------------------------------------------
# model files


def model_from_dict(data: dict) -> PolynomialSystemSpec:
    if not isinstance(data, dict):
        raise ModelParseError("model file must contain a JSON object")
    for key in ("n", "d_S", "F", "initial_state"):
        if key not in data:
            raise ModelParseError("missing top-level key", field=key)
    n, d_S = data["n"], data["d_S"]
    if not isinstance(n, int) or not isinstance(d_S, int):
        raise ModelParseError("n and d_S must be integers", field="n/d_S")
    params = tuple(
        distribution_from_dict(rec, f"parameters[{i}]") for i, rec in enumerate(data.get("parameters", []))
    )
    F = data["F"]
    if not isinstance(F, list) or len(F) != d_S + 1:
        raise ShapeMismatchError(f"F must list {d_S + 1} entries (F_0..F_{d_S})")
    constants, linear = [], []
    for i, entry in enumerate(F):
        if not isinstance(entry, dict):
            raise ModelParseError("expected {const, linear} record", field=f"F[{i}]")
        constants.append(entry.get("const", np.zeros((n, n**i))))
        linear.append({int(p): C for p, C in entry.get("linear", {}).items()})
    coeffs = CoefficientModel(n, d_S, params, constants, linear)
    init = data["initial_state"]
    if not isinstance(init, dict) or "sources" not in init or "components" not in init:
        raise ModelParseError("initial_state needs 'sources' and 'components'", field="initial_state")
    sources = tuple(
        distribution_from_dict(rec, f"initial_state.sources[{i}]") for i, rec in enumerate(init["sources"])
    )
    comps = tuple(
        expr_from_dict(node, f"initial_state.components[{c}]") for c, node in enumerate(init["components"])
    )
    return PolynomialSystemSpec(
        coeffs, InitialStateModel(sources, comps), str(data.get("name", "model")), dict(data.get("metadata", {}))
    )


def load_model(path) -> PolynomialSystemSpec:
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ModelParseError(f"{path}: not a text model file") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{path}: {exc.msg}", line=exc.lineno) from None
    return model_from_dict(data)


def save_model(spec: PolynomialSystemSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


# --------------------------------------------------------------------------
# the two demo systems


def build_logistic_model(r: ScalarDistribution, x0: ScalarDistribution, name="logistic") -> PolynomialSystemSpec:
    """``x(t+1) = r(t) x(t) (1 - x(t))`` with F_0 = 0, F_1 = r, F_2 = -r."""
    lo_hi = _support_bounds(r)
    if lo_hi and (lo_hi[0] < 0 or lo_hi[1] > 4):
        warnings.warn("logistic growth rate has support outside [0, 4]", stacklevel=2)
    lo_hi = _support_bounds(x0)
    if lo_hi and (lo_hi[0] < 0 or lo_hi[1] > 1):
        warnings.warn("logistic initial state has support outside [0, 1]", stacklevel=2)
    coeffs = CoefficientModel(
        n=1,
        d_S=2,
        params=(r,),
        constants=[[[0.0]], [[0.0]], [[0.0]]],
        linear=[{}, {0: [[1.0]]}, {0: [[-1.0]]}],
    )
    return PolynomialSystemSpec(coeffs, InitialStateModel.independent([x0]), name, {"generator": "logistic"})


def _support_bounds(d):
    if isinstance(d, Point):
        return d.value, d.value
    if isinstance(d, Finite):
        return min(d.values), max(d.values)
    if isinstance(d, (Uniform, TruncatedGaussian)):
        return d.lo, d.hi
    if isinstance(d, Gaussian):
        return -math.inf, math.inf
    return None


# state order of the bicycle model
X, Y, PSI, V, C, S = range(6)


def _place(M, row, cols, value, n=6):
    """Add ``value`` at the Kronecker column of the sorted index tuple ``cols``."""
    idx = 0
    for c in sorted(cols):
        idx = idx * n + c
    M[row, idx] += value


def build_bicycle_model(delta, beta, ell, a: ScalarDistribution, init: InitialStateModel, name="bicycle"):
    """Second-order Taylor discretisation of the polynomialised kinematic bicycle.

    State ``[X, Y, psi, v, c, s]`` with ``c = cos(psi + beta)``, ``s = sin(psi + beta)``
    and a single random parameter, the acceleration ``a(t)``.
    """
    if not delta > 0 or not ell > 0:
        raise ShapeMismatchError("bicycle model needs delta > 0 and ell > 0")
    n = 6
    sb = math.sin(beta)
    h = delta**2 / 2
    k1 = sb / ell
    const = [np.zeros((n, n**i)) for i in range(4)]
    lin = [np.zeros((n, n**i)) for i in range(4)]

    # F_1: identity part and the v/ell heading term
    for i in range(n):
        const[1][i, i] = 1.0
    _place(const[1], PSI, [V], delta * k1)
    # terms linear in a
    _place(lin[0], PSI, [], h * k1)
    _place(lin[0], V, [], delta)
    _place(lin[1], X, [C], h)
    _place(lin[1], Y, [S], h)
    _place(lin[1], C, [S], -h * k1)
    _place(lin[1], S, [C], h * k1)
    # quadratic terms
    _place(const[2], X, [C, V], delta)
    _place(const[2], Y, [S, V], delta)
    _place(const[2], C, [S, V], -delta * k1)
    _place(const[2], S, [C, V], delta * k1)
    # cubic terms
    _place(const[3], X, [S, V, V], -h * k1)
    _place(const[3], Y, [C, V, V], h * k1)
    _place(const[3], C, [C, V, V], -h * k1**2)
    _place(const[3], S, [S, V, V], -h * k1**2)

    coeffs = CoefficientModel(
        n=n,
        d_S=3,
        params=(a,),
        constants=const,
        linear=[{0: lin[i]} if np.any(lin[i]) else {} for i in range(4)],
    )
    meta = {"generator": "bicycle", "delta": delta, "beta": beta, "ell": ell}
    return PolynomialSystemSpec(coeffs, init, name, meta)


def bicycle_initial_state(beta, X0, Y0, psi0, v0) -> InitialStateModel:
    """Independent X, Y, psi, v sources; c and s follow from the heading."""
    return InitialStateModel(
        (X0, Y0, psi0, v0),
        (
            Source(0),
            Source(1),
            Source(2),
            Source(3),
            Trig("cos", 2, 1.0, beta),
            Trig("sin", 2, 1.0, beta),
        ),
    )


def demo_logistic_model() -> PolynomialSystemSpec:
    return build_logistic_model(Uniform(0.3, 0.7), TruncatedGaussian(0.5, 0.1, 0.0, 1.0))


def demo_vehicle_model() -> PolynomialSystemSpec:
    beta = math.pi / 8
    g = Gaussian(0.0, 0.1)
    return build_bicycle_model(0.1, beta, 2.5, Uniform(0.9, 1.0), bicycle_initial_state(beta, g, g, g, g), "vehicle")
