"""Kronecker products, powers and the stacked block layout ``[1, x, x^[2], ...]``."""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from .errors import SizeLimitError

DEFAULT_SIZE_LIMIT = 10**7

_limit_state = threading.local()


def get_size_limit() -> int:
    return getattr(_limit_state, "value", DEFAULT_SIZE_LIMIT)


def set_size_limit(limit: int) -> None:
    if limit <= 0:
        raise ValueError("size limit must be positive")
    _limit_state.value = int(limit)


@contextlib.contextmanager
def size_limit(limit: int):
    """Temporarily change the per-matrix element limit (thread-local)."""
    old = get_size_limit()
    set_size_limit(limit)
    try:
        yield
    finally:
        set_size_limit(old)


def check_size(what: str, elements: int, limit: int | None = None) -> None:
    allowed = get_size_limit() if limit is None else limit
    if elements > allowed:
        raise SizeLimitError(what, elements, allowed)


def stacked_dim(n: int, k: int) -> int:
    """Length of ``[1, x, ..., x^[k]]`` for x in R^n, i.e. sum of n^i for i <= k."""
    if k < 0:
        return 0
    if n == 1:
        return k + 1
    return (n ** (k + 1) - 1) // (n - 1)


def kron_product(A, B, limit: int | None = None) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    check_size("kron_product", A.size * B.size, limit)
    return np.kron(A, B)


def kron_power(M, k: int, limit: int | None = None) -> np.ndarray:
    """k-th Kronecker power with ``M^[0] = 1`` (shape (1,) or (1, 1))."""
    if k < 0:
        raise ValueError("Kronecker power must be non-negative")
    M = np.asarray(M, dtype=np.float64)
    check_size("kron_power", M.size**k, limit)
    out = np.ones((1,) * max(M.ndim, 1))
    for _ in range(k):
        out = np.kron(out, M)
    return out


@dataclass(frozen=True)
class BlockLayout:
    """Offsets of the blocks ``x^[0], ..., x^[max_block]`` in a stacked vector."""

    n: int
    max_block: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("state dimension must be positive")
        if self.max_block < 0:
            raise ValueError("max_block must be non-negative")

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(stacked_dim(self.n, j - 1) for j in range(self.max_block + 2))

    @property
    def total(self) -> int:
        return stacked_dim(self.n, self.max_block)

    def offset(self, j: int) -> int:
        self._check(j)
        return stacked_dim(self.n, j - 1)

    def block_slice(self, j: int) -> slice:
        start = self.offset(j)
        return slice(start, start + self.n**j)

    def _check(self, j: int) -> None:
        if not 0 <= j <= self.max_block:
            raise IndexError(f"block {j} outside 0..{self.max_block}")


def stacked_view(v, layout: BlockLayout, j: int) -> np.ndarray:
    """Return block j of a stacked vector (a view, not a copy)."""
    v = np.asarray(v)
    if v.shape[0] != layout.total:
        raise ValueError(f"vector length {v.shape[0]} does not match layout {layout.total}")
    return v[layout.block_slice(j)]


def stack_blocks(blocks) -> np.ndarray:
    return np.concatenate([np.ravel(np.asarray(b, dtype=np.float64)) for b in blocks])


def multi_index(n: int, j: int) -> np.ndarray:
    """Digits (i_1..i_j) of every flat index of an n^j Kronecker vector, shape (n^j, j)."""
    if j == 0:
        return np.zeros((1, 0), dtype=np.int64)
    flat = np.arange(n**j, dtype=np.int64)
    digits = np.empty((n**j, j), dtype=np.int64)
    for pos in range(j - 1, -1, -1):
        digits[:, pos] = flat % n
        flat //= n
    return digits


def exponent_counts(n: int, j: int) -> np.ndarray:
    """Per flat index of x^[j], how often each component appears, shape (n^j, n)."""
    if n == 1:
        return np.array([[j]], dtype=np.int64)
    digits = multi_index(n, j)
    counts = np.zeros((digits.shape[0], n), dtype=np.int64)
    rows = np.arange(digits.shape[0])
    for pos in range(j):
        # one column per row per position, so plain fancy += is safe
        counts[rows, digits[:, pos]] += 1
    return counts
