"""Dense float64 matrix helpers, a portable RNG, and weight initializers.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NonFiniteError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG_53 = 2.0 ** -53


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix", m.shape)
    check_finite(m, name)
    return m


def check_finite(m: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.isfinite(m).all():
        bad = int(np.size(m) - np.count_nonzero(np.isfinite(m)))
        raise NonFiniteError(f"{name}: {bad} non-finite entr{'y' if bad == 1 else 'ies'}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product with a fixed summation order: k ascending, one rank-1 update
    at a time, so every entry is the same IEEE sequence on every platform.

    Adapter hot paths use BLAS (``@``) instead; this is the reference.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    out = np.zeros((a.shape[0], b.shape[1]))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(a.shape[1]):
            out += np.multiply.outer(a[:, k], b[k, :])
    return check_finite(out, "matmul")


def frob_norm(m: np.ndarray) -> float:
    flat = np.ravel(m)
    if flat.size == 0:
        return 0.0
    # scale by the largest magnitude so squares neither underflow nor overflow
    top = float(np.max(np.abs(flat)))
    if top == 0.0 or not math.isfinite(top):
        return top
    scaled = flat / top
    return top * math.sqrt(float(np.dot(scaled, scaled)))


def frob_inner(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError("frob_inner", a.shape, b.shape)
    return float(np.dot(np.ravel(a), np.ravel(b)))


def col_norms(m: np.ndarray) -> np.ndarray:
    """l2 norm of every column; zero columns give 0 and the caller decides."""
    return np.sqrt(np.einsum("ij,ij->j", m, m))


def lowrank_frob_norm(a: np.ndarray, b: np.ndarray) -> float:
    """||a @ b||_F computed from the r x r Gram matrices, without forming a @ b.

    Uses ||AB||_F^2 = <A^T A, B B^T>, which costs O(r^2 (n + m)).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("lowrank_frob_norm", a.shape, b.shape)
    sq = float(np.dot(np.ravel(a.T @ a), np.ravel(b @ b.T)))
    # rounding can push a (near-)zero Gram inner product slightly negative
    return math.sqrt(max(sq, 0.0))


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_int(state: int) -> int:
    """One scalar splitmix64 output for the counter value ``state + gamma``."""
    z = (state + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 generator.

    The whole state is one 64-bit counter, so a stream of ``k`` outputs can be
    produced in a single vectorized pass and the state round-trips through an
    int. Normals use Box-Muller on consecutive uniform pairs (cosine branch
    only, so each normal consumes exactly two uniforms).
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @classmethod
    def from_state(cls, state: int) -> "Rng":
        return cls(state)

    def get_state(self) -> int:
        return self.state

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream keyed by integers; does not advance self."""
        s = self.state
        for k in keys:
            s = splitmix64_int((s ^ (int(k) * GOLDEN_GAMMA)) & MASK64)
        return Rng(s)

    def next_u64(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        z = _mix64(steps + np.uint64(self.state))
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self, count: int) -> np.ndarray:
        """``count`` doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def normal(self, count: int) -> np.ndarray:
        u = self.uniform(2 * count).reshape(count, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return radius * np.cos(2.0 * math.pi * u[:, 1])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def gaussian_init(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise DimensionError("gaussian_init", (rows, cols))
    if not std >= 0:
        raise ValueError(f"std must be >= 0, got {std}")
    draws = rng.normal(rows * cols).reshape(rows, cols)
    if std == 0:
        return np.zeros((rows, cols))
    return draws * std


def kaiming_init(rng: Rng, rows: int, cols: int) -> np.ndarray:
    # fan-in is the row count because layers compute y = x @ W
    return gaussian_init(rng, rows, cols, math.sqrt(2.0 / rows))
