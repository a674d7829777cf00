"""SPD factorizations, solves and multivariate-normal sampling.

Sparse (tapered) covariances are factorized densely; the sparsity pattern
is kept on the factor for reference only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class FactorizationError(np.linalg.LinAlgError):
    """Matrix is not positive definite; ``index`` is the failing pivot (0-based)."""

    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"matrix not positive definite (pivot {index})")


@dataclass(frozen=True)
class SpdFactor:
    lower: np.ndarray
    logdet: float
    pattern: object = None

    @property
    def p(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T

    def inverse(self) -> np.ndarray:
        return sla.cho_solve((self.lower, True), np.eye(self.p))


def cholesky(m) -> SpdFactor:
    """Lower Cholesky factor of a CovMatrix, dense array or sparse matrix."""
    values = getattr(m, "values", m)
    pattern = None
    if sp.issparse(values):
        pattern = values.copy().tocsr()
        pattern.data[:] = 1.0
        values = values.toarray()
    a = np.asarray(values, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    # LAPACK potrf reports the order of the first non-PD leading minor
    c, info = sla.lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        if info > 0:
            raise FactorizationError(info - 1)
        raise ValueError(f"dpotrf argument error {info}")
    d = np.diag(c)
    if not np.all(d > 0):
        raise FactorizationError(int(np.argmin(d)))
    lower = np.ascontiguousarray(c)
    lower.setflags(write=False)
    return SpdFactor(lower, float(2.0 * np.log(d).sum()), pattern)


def _check(f: SpdFactor, b: np.ndarray):
    if b.shape[0] != f.p:
        raise ValueError(f"dimension mismatch: factor is {f.p}x{f.p}, rhs has {b.shape[0]} rows")


def solve(f: SpdFactor, b):
    """Sigma^{-1} b for a vector or a matrix of right-hand sides."""
    b = np.asarray(b, dtype=float)
    _check(f, b)
    return sla.cho_solve((f.lower, True), b)


def whiten(f: SpdFactor, b):
    """L^{-1} b."""
    b = np.asarray(b, dtype=float)
    _check(f, b)
    return sla.solve_triangular(f.lower, b, lower=True)


def quad_form(f: SpdFactor, v) -> float:
    """v' Sigma^{-1} v via one triangular solve."""
    w = whiten(f, np.asarray(v, dtype=float).reshape(-1))
    return float(w @ w)


def trace_quad(f: SpdFactor, rows) -> float:
    """sum_i r_i' Sigma^{-1} r_i over the rows of an (m, p) matrix."""
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        return 0.0
    w = whiten(f, rows.T)
    return float(np.einsum("ij,ij->", w, w))


@dataclass(frozen=True)
class RngStream:
    """Named, splittable random stream.

    The generator is PCG64 seeded from ``SeedSequence(seed, spawn_key=key)``,
    so a given (seed, key) produces the same numbers on every platform and
    independently of how work is scheduled.
    """

    seed: int
    key: tuple = ()

    @property
    def stream(self) -> tuple:
        return self.key

    def child(self, *names) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(_key_int(n) for n in names))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))


def _key_int(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & (2**64 - 1)
    # stable across runs, unlike hash()
    return int.from_bytes(hashlib.blake2b(str(name).encode("utf-8"), digest_size=8).digest(), "little")


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_mvn(mean, f: SpdFactor, rng, count: int) -> np.ndarray:
    """(count, p) matrix of i.i.d. N(mean, L L') rows."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (f.p,))
    z = _as_generator(rng).standard_normal((count, f.p))
    return mean + z @ f.lower.T
