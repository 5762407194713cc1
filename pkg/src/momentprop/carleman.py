"""Expected Carleman blocks ``E_{j,k} = E[A_{j,k}(t)]`` and the assembled ``E(N, M)``.

``A_{j,k}(t)`` is the sum of ``F_{i_1}(t) (x) ... (x) F_{i_j}(t)`` over index sequences
with entries at most ``d_S`` summing to ``k``.  Because each ``F_i`` is affine in the
step parameters, the expectation of such a product is a combination of joint
parameter moments ``prod_p E[w_p^g_p]``.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import MomentPropError
from .kron import BlockLayout, check_size, kron_product, stacked_dim
from .model import CoefficientModel, raw_moment

CACHE_FORMAT_VERSION = 1
_CACHE_MAGIC = b"MOMENTPROP-E\n"


@dataclass(frozen=True)
class IndexSequenceSet:
    j: int
    k: int
    d_S: int
    sequences: tuple

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)


def enumerate_H(j: int, k: int, d_S: int) -> IndexSequenceSet:
    """All j-tuples with entries in 0..d_S summing to k, in lexicographic order."""
    if j < 0 or k < 0:
        raise ValueError("j and k must be non-negative")

    def rec(length, total):
        if length == 0:
            if total == 0:
                yield ()
            return
        for first in range(min(d_S, total) + 1):
            # the remaining entries can reach at most (length-1)*d_S
            if total - first > (length - 1) * d_S:
                continue
            for rest in rec(length - 1, total - first):
                yield (first,) + rest

    return IndexSequenceSet(j, k, d_S, tuple(rec(j, k)))


def joint_param_moment(params, counts) -> float:
    """``prod_p E[w_p^counts_p]`` for independent parameter components."""
    out = 1.0
    for d, c in zip(params, counts):
        if c:
            out *= raw_moment(d, int(c))
    return out


def expected_kron_block(model: CoefficientModel, seq, limit=None) -> np.ndarray:
    """``E[F_{i_1} (x) ... (x) F_{i_j}]`` by expanding the affine parameter form.

    All ``(P+1)^j`` constant/parameter choices are enumerated and grouped by their
    parameter-exponent vector before the moment lookup.
    """
    seq = tuple(seq)
    n = model.n
    if any(i < 0 or i > model.d_S for i in seq):
        raise ValueError(f"sequence {seq} has entries outside 0..{model.d_S}")
    rows, cols = n ** len(seq), n ** sum(seq)
    check_size("expected_kron_block", rows * cols, limit)
    P = model.num_params
    grouped: dict[tuple, np.ndarray] = {}
    choices = [model.terms(i) for i in seq]
    for picks in itertools.product(*choices):
        counts = [0] * P
        mat = np.ones((1, 1))
        for p, C in picks:
            if p is not None:
                counts[p] += 1
            mat = np.kron(mat, C)
        key = tuple(counts)
        if key in grouped:
            grouped[key] += mat
        else:
            grouped[key] = mat
    out = np.zeros((rows, cols))
    for key in sorted(grouped):
        out += joint_param_moment(model.params, key) * grouped[key]
    return out


def sample_A_jk(model: CoefficientModel, w, j: int, k: int) -> np.ndarray:
    """One realisation of ``A_{j,k}(t)`` for a parameter draw ``w``."""
    F = [model.F(i, w) for i in range(model.d_S + 1)]
    out = np.zeros((model.n**j, model.n**k))
    for seq in enumerate_H(j, k, model.d_S):
        mat = np.ones((1, 1))
        for i in seq:
            mat = kron_product(mat, F[i])
        out += mat
    return out


# --------------------------------------------------------------------------
# block construction by dynamic programming over the sequence length


class _ExponentIndex:
    """Parameter-exponent vectors of total degree <= max_degree and the +e_p shifts."""

    def __init__(self, params, max_degree):
        P = len(params)
        gammas = [()]
        if P:
            gammas = [
                g for d in range(max_degree + 1) for g in _compositions(d, P)
            ]
        self.gammas = gammas
        index = {g: i for i, g in enumerate(gammas)}
        self.size = len(gammas)
        self.shift = []
        for p in range(P):
            src, dst = [], []
            for g, i in index.items():
                h = list(g)
                h[p] += 1
                h = tuple(h)
                if h in index:
                    src.append(i)
                    dst.append(index[h])
            self.shift.append((np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)))
        self.moments = np.array([joint_param_moment(params, g) for g in gammas])


def _compositions(total, parts):
    """Exponent vectors of length ``parts`` summing to ``total``, in reverse lex order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _batched_kron(X, C):
    G, a, b = X.shape
    c, d = C.shape
    return (X[:, :, None, :, None] * C[None, None, :, None, :]).reshape(G, a * c, b * d)


def _extend_from(model, gidx, k_prev, X, M):
    """Contributions of appending one more factor F_i to a partial product block."""
    out = []
    for i in range(model.d_S + 1):
        k = k_prev + i
        if k > M:
            break
        for p, C in model.terms(i):
            if not C.any():
                continue
            K = _batched_kron(X, C)
            if p is None:
                out.append((k, None, K))
            else:
                out.append((k, p, K))
    return out


def _expected_rows(model: CoefficientModel, N: int, M: int, threads: int = 1):
    """Yield ``(j, {k: E_{j,k}})`` for j = 0..N, only non-empty k <= M kept."""
    gidx = _ExponentIndex(model.params, N)
    G = gidx.size
    yield 0, {0: np.ones((1, 1))}
    if model.n == 1:
        yield from _expected_rows_scalar(model, N, M, gidx)
        return
    base = np.zeros((G, 1, 1))
    base[0] = 1.0
    prev = {0: base}
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for j in range(1, N + 1):
            items = sorted(prev.items())
            if pool is None:
                parts = [_extend_from(model, gidx, kp, X, M) for kp, X in items]
            else:
                parts = list(pool.map(lambda it: _extend_from(model, gidx, it[0], it[1], M), items))
            cur: dict[int, np.ndarray] = {}
            # merge in a fixed order so results do not depend on scheduling
            for contribs in parts:
                for k, p, K in contribs:
                    if k not in cur:
                        cur[k] = np.zeros((G,) + K.shape[1:])
                    if p is None:
                        cur[k] += K
                    else:
                        src, dst = gidx.shift[p]
                        cur[k][dst] += K[src]
            cur = {k: B for k, B in cur.items() if B.any()}
            yield j, {k: np.tensordot(gidx.moments, B, axes=1) for k, B in sorted(cur.items())}
            prev = cur
    finally:
        if pool is not None:
            pool.shutdown()


def _expected_rows_scalar(model, N, M, gidx):
    # n == 1: every block is 1x1, so whole rows are handled as (G, M+1) arrays
    G = gidx.size
    prev = np.zeros((G, M + 1))
    prev[0, 0] = 1.0
    for j in range(1, N + 1):
        cur = np.zeros_like(prev)
        for i in range(model.d_S + 1):
            if i > M:
                break
            width = M + 1 - i
            for p, C in model.terms(i):
                c = C[0, 0]
                if c == 0.0:
                    continue
                if p is None:
                    cur[:, i:] += c * prev[:, :width]
                else:
                    src, dst = gidx.shift[p]
                    cur[dst, i:] += c * prev[src, :width]
        row = gidx.moments @ cur
        nz = np.flatnonzero(np.any(cur != 0.0, axis=0))
        yield j, {int(k): np.array([[row[k]]]) for k in nz}
        prev = cur


def build_E_jk(model: CoefficientModel, j: int, k: int, limit=None) -> np.ndarray:
    """``E_{j,k}`` of shape n^j x n^k; zero when no index sequence reaches k."""
    if j < 0 or k < 0:
        raise ValueError("j and k must be non-negative")
    check_size("E_jk", model.n**j * model.n**k, limit)
    if k > j * model.d_S:
        return np.zeros((model.n**j, model.n**k))
    for row, blocks in _expected_rows(model, j, k):
        if row == j:
            return blocks.get(k, np.zeros((model.n**j, model.n**k)))
    raise AssertionError("unreachable")


@dataclass
class ExpectedBlockMatrix:
    """``E(N, M)``: blocks ``E_{j,k}`` for j <= N, k <= M, stored sparsely by block."""

    n: int
    N: int
    M: int
    blocks: dict = field(repr=False)
    model_hash: str = ""
    d_S: int = 0

    @property
    def row_layout(self):
        return BlockLayout(self.n, self.N)

    @property
    def col_layout(self):
        return BlockLayout(self.n, self.M)

    @property
    def shape(self):
        return (stacked_dim(self.n, self.N), stacked_dim(self.n, self.M))

    def block(self, j, k) -> np.ndarray:
        if not (0 <= j <= self.N and 0 <= k <= self.M):
            raise IndexError(f"block ({j}, {k}) outside E({self.N}, {self.M})")
        if (j, k) in self.blocks:
            return self.blocks[(j, k)]
        return np.zeros((self.n**j, self.n**k))

    @cached_property
    def matrix(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rl, cl = self.row_layout, self.col_layout
        for (j, k), B in self.blocks.items():
            out[rl.block_slice(j), cl.block_slice(k)] = B
        out.setflags(write=False)
        return out


def build_E(model: CoefficientModel, N: int, M: int, threads: int = 1, limit=None) -> ExpectedBlockMatrix:
    if N < 0 or M < 0:
        raise ValueError("N and M must be non-negative")
    rows, cols = stacked_dim(model.n, N), stacked_dim(model.n, M)
    check_size(f"E({N},{M})", rows * cols, limit)
    blocks = {}
    for j, row in _expected_rows(model, N, M, threads=threads):
        for k, B in row.items():
            blocks[(j, k)] = B
    return ExpectedBlockMatrix(model.n, N, M, blocks, model.content_hash(), model.d_S)


# --------------------------------------------------------------------------
# on-disk cache


def save_E(E: ExpectedBlockMatrix, path) -> None:
    header = {
        "format_version": CACHE_FORMAT_VERSION,
        "model_hash": E.model_hash,
        "n": E.n,
        "d_S": E.d_S,
        "N": E.N,
        "M": E.M,
    }
    data = np.ascontiguousarray(E.matrix, dtype="<f8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(data.tobytes(order="C"))
    tmp.replace(path)


def load_E(path) -> ExpectedBlockMatrix:
    with open(path, "rb") as fh:
        if fh.readline() != _CACHE_MAGIC:
            raise MomentPropError(f"{path}: not a propagator cache file")
        header = json.loads(fh.readline())
        if header.get("format_version") != CACHE_FORMAT_VERSION:
            raise MomentPropError(f"{path}: unsupported cache format {header.get('format_version')}")
        n, N, M = header["n"], header["N"], header["M"]
        shape = (stacked_dim(n, N), stacked_dim(n, M))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != shape[0] * shape[1]:
        raise MomentPropError(f"{path}: truncated cache payload")
    mat = data.reshape(shape).astype(np.float64)
    rl, cl = BlockLayout(n, N), BlockLayout(n, M)
    blocks = {}
    for j in range(N + 1):
        for k in range(M + 1):
            B = mat[rl.block_slice(j), cl.block_slice(k)]
            if B.any():
                blocks[(j, k)] = B.copy()
    E = ExpectedBlockMatrix(n, N, M, blocks, header["model_hash"], header["d_S"])
    mat.setflags(write=False)
    E.__dict__["matrix"] = mat
    return E


def cache_path(cache_dir, model: CoefficientModel, N: int, M: int) -> Path:
    return Path(cache_dir) / f"{model.content_hash()[:24]}_N{N}_M{M}.bin"


def cached_build_E(model, N, M, cache_dir=".moment_cache", threads=1, limit=None) -> ExpectedBlockMatrix:
    """Load ``E(N, M)`` from the cache directory, building and storing it on a miss."""
    check_size(f"E({N},{M})", stacked_dim(model.n, N) * stacked_dim(model.n, M), limit)
    path = cache_path(cache_dir, model, N, M)
    if path.exists():
        try:
            E = load_E(path)
            if E.model_hash == model.content_hash() and (E.N, E.M) == (N, M):
                return E
        except (MomentPropError, ValueError, KeyError):
            pass
    E = build_E(model, N, M, threads=threads, limit=limit)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_E(E, path)
    return E
