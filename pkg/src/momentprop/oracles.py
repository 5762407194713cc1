"""Ground truth by Monte Carlo simulation and by exact path enumeration.

Random numbers come from counter-based Philox streams.  Every draw is addressed
by ``(seed, stream kind, time step, parameter slot)`` plus the sample index as
position inside that stream, so a given sample sees the same numbers no matter
how many other samples are drawn alongside it in a batch of the same size or
larger.
"""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, OracleError, PreconditionError
from .model import Finite, Point, PolynomialSystemSpec, is_finite_valued

SEED_ENV = "MOMENT_SEED"
DEFAULT_SEED = 0
MAX_PATHS = 10**6

_INIT_STREAM = 0
_PARAM_STREAM = 1
MEASUREMENT_STREAM = 2


def resolve_seed(flag=None) -> int:
    """CLI flag wins over the MOMENT_SEED environment variable."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        return int(env)
    return DEFAULT_SEED


def uniforms(seed: int, kind: int, step: int, slot: int, count: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=(kind, step, slot))
    return np.random.Generator(np.random.Philox(ss)).random(count)


def draw_initial(spec: PolynomialSystemSpec, num_samples: int, seed: int) -> np.ndarray:
    srcs = np.column_stack([
        d.ppf(uniforms(seed, _INIT_STREAM, 0, s, num_samples)) for s, d in enumerate(spec.init.sources)
    ]) if spec.init.sources else np.zeros((num_samples, 0))
    return spec.init.evaluate(srcs)


def draw_params(spec: PolynomialSystemSpec, step: int, num_samples: int, seed: int) -> np.ndarray:
    P = spec.coeffs.num_params
    if P == 0:
        return np.zeros((num_samples, 0))
    return np.column_stack([
        d.ppf(uniforms(seed, _PARAM_STREAM, step, p, num_samples)) for p, d in enumerate(spec.coeffs.params)
    ])


def batch_kron_power(X: np.ndarray, i: int) -> np.ndarray:
    """Row-wise Kronecker power: (S, n) -> (S, n^i)."""
    out = np.ones((X.shape[0], 1))
    for _ in range(i):
        out = (out[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
    return out


def step_batch(coeffs, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """One step of ``x(t+1) = sum_i F_i(w) x^[i]`` for many samples at once."""
    out = np.zeros_like(X)
    for i in range(coeffs.d_S + 1):
        Xi = batch_kron_power(X, i)
        for p, C in coeffs.terms(i):
            if not C.any():
                continue
            contrib = Xi @ C.T
            out += contrib if p is None else W[:, [p]] * contrib
    return out


def simulate(spec: PolynomialSystemSpec, t: int, num_samples: int, seed: int) -> np.ndarray:
    """States of shape (num_samples, t+1, n); diverged samples hold non-finite values."""
    X = draw_initial(spec, num_samples, seed)
    traj = np.empty((num_samples, t + 1, spec.n))
    traj[:, 0] = X
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(t):
            X = step_batch(spec.coeffs, X, draw_params(spec, k, num_samples, seed))
            traj[:, k + 1] = X
    return traj


def sample_trajectory(spec: PolynomialSystemSpec, t: int, seed: int) -> list[np.ndarray]:
    traj = simulate(spec, t, 1, seed)[0]
    bad = np.flatnonzero(~np.all(np.isfinite(traj), axis=1))
    if bad.size:
        raise DivergenceError(int(bad[0]), list(traj[: bad[0]]))
    return list(traj)


@dataclass
class MomentEstimate:
    mean: np.ndarray
    se: np.ndarray
    num_used: int
    num_diverged: int


def _estimate(values: np.ndarray) -> MomentEstimate:
    ok = np.all(np.isfinite(values), axis=1)
    used = values[ok]
    m = used.shape[0]
    if m < 2:
        raise OracleError("fewer than two finite samples")
    # numpy reductions sum pairwise, which keeps the aggregation order fixed
    mean = used.mean(axis=0)
    se = used.std(axis=0, ddof=1) / math.sqrt(m)
    return MomentEstimate(mean, se, m, int((~ok).sum()))


def empirical_moments(spec: PolynomialSystemSpec, j: int, t: int, num_samples: int, seed: int) -> MomentEstimate:
    """Sample mean and standard error of ``x^[j](t)``."""
    if num_samples < 2:
        raise PreconditionError("need at least two samples")
    X = simulate(spec, t, num_samples, seed)[:, t]
    with np.errstate(over="ignore", invalid="ignore"):
        return _estimate(batch_kron_power(X, j))


@dataclass
class TailEstimate:
    frequency: float
    se: float
    num_used: int
    num_diverged: int


def empirical_tail(spec, center, alpha: float, t: int, num_samples: int, seed: int) -> TailEstimate:
    """Fraction of samples with ``||x(t) - center|| >= alpha`` and its binomial SE."""
    if num_samples < 1:
        raise PreconditionError("need at least one sample")
    X = simulate(spec, t, num_samples, seed)[:, t]
    ok = np.all(np.isfinite(X), axis=1)
    dist = np.linalg.norm(X[ok] - np.asarray(center, dtype=np.float64), axis=1)
    m = int(ok.sum())
    if m == 0:
        raise OracleError("every sample diverged")
    freq = float(np.mean(dist >= alpha))
    return TailEstimate(freq, math.sqrt(freq * (1 - freq) / m), m, num_samples - m)


def _support(d):
    if isinstance(d, Point):
        return np.array([float(d.value)]), np.array([1.0])
    if isinstance(d, Finite):
        return np.array(d.values), np.array(d.probabilities)
    raise OracleError(f"exact enumeration needs finite-valued distributions, got {d.kind}")


def _joint_support(dists):
    if not dists:
        return np.zeros((1, 0)), np.ones(1)
    supports = [_support(d) for d in dists]
    vals = np.array(list(itertools.product(*[s[0] for s in supports])))
    probs = np.array([math.prod(c) for c in itertools.product(*[s[1] for s in supports])])
    return vals, probs


def enumeration_path_count(spec: PolynomialSystemSpec, t: int) -> int:
    for d in list(spec.init.sources) + list(spec.coeffs.params):
        if not is_finite_valued(d):
            raise OracleError(f"exact enumeration needs finite-valued distributions, got {d.kind}")
    init = math.prod(len(_support(d)[0]) for d in spec.init.sources)
    per_step = math.prod(len(_support(d)[0]) for d in spec.coeffs.params)
    return init * per_step**t


def exact_enumeration_moments(spec: PolynomialSystemSpec, j: int, t: int) -> np.ndarray:
    """``E[x^[j](t)]`` by summing over every initial value and parameter path."""
    paths = enumeration_path_count(spec, t)
    if paths > MAX_PATHS:
        raise OracleError(f"{paths} paths exceed the enumeration limit {MAX_PATHS}")
    src_vals, probs = _joint_support(spec.init.sources)
    X = spec.init.evaluate(src_vals)
    W, wp = _joint_support(spec.coeffs.params)
    for _ in range(t):
        K = X.shape[0]
        X = step_batch(spec.coeffs, np.repeat(X, len(wp), axis=0), np.tile(W, (K, 1)))
        probs = np.repeat(probs, len(wp)) * np.tile(wp, K)
    if not np.all(np.isfinite(X)):
        raise DivergenceError(t)
    return probs @ batch_kron_power(X, j)
