"""Dense float64 linear algebra used by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 (row-major).
Cholesky and SPD inversion go through LAPACK (``potrf``/``potri``) so the
pivot index of a failed factorization can be reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack


class NumericalError(RuntimeError):
    """Base class for numerical failures (CLI exit code 2)."""


class NotPositiveDefinite(NumericalError):
    def __init__(self, pivot: int, context: str = ""):
        self.pivot = pivot
        msg = f"not positive definite (pivot {pivot})"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


def as_mat(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.isfinite(m).all():
        raise NumericalError(f"{what} contains NaN or Inf")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return (M + M^T) / 2, which is exactly symmetric."""
    return 0.5 * (m + m.T)


_LEAF = 8
_LEAF_IDX = np.tril_indices(_LEAF, -1)


def mirror_upper(m: np.ndarray, block: int = 128) -> np.ndarray:
    """Copy the upper triangle onto the lower one, in place.

    Works in row panels so temporaries stay at ``block x n``; diagonal
    panels are split into 8 x 8 leaves filled by index pairs.
    """
    n = m.shape[0]
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        m[i0:i1, :i0] = m[:i0, i0:i1].T
        for r0 in range(i0, i1, _LEAF):
            r1 = min(r0 + _LEAF, i1)
            m[r0:r1, i0:r0] = m[i0:r0, r0:r1].T
            rows, cols = _LEAF_IDX if r1 - r0 == _LEAF else np.tril_indices(r1 - r0, -1)
            leaf = m[r0:r1, r0:r1]
            leaf[rows, cols] = leaf[cols, rows]
    return m


def mirror_lower(m: np.ndarray, block: int = 128) -> np.ndarray:
    """Copy the lower triangle onto the upper one, in place."""
    mirror_upper(m.T, block)
    return m


def gram(X) -> np.ndarray:
    """X @ X.T, written from one triangle so the result is bitwise symmetric."""
    X = as_mat(X)
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("empty input")
    G = X @ X.T
    return check_finite(mirror_upper(G), "gram")


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def upper(self) -> np.ndarray:
        return self.lower.T

    def solve(self, b) -> np.ndarray:
        """Solve (L L^T) x = b."""
        x, info = lapack.dpotrs(self.lower, np.asarray(b, dtype=np.float64), lower=1)
        if info != 0:
            raise NumericalError(f"potrs failed with info={info}")
        return x


def cholesky(A, context: str = "") -> CholFactor:
    A = as_mat(A)
    if A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValueError(f"cholesky needs a non-empty square matrix, got {A.shape}")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1, context)
    if info < 0:
        raise ValueError(f"potrf argument {-info} invalid")
    return CholFactor(c)


def inverse_from_cholesky(factor: CholFactor) -> np.ndarray:
    inv, info = lapack.dpotri(factor.lower, lower=1)
    if info != 0:
        raise NotPositiveDefinite(info - 1, "potri")
    # potri fills only the lower triangle
    inv = np.array(inv.T, order="C")
    return mirror_upper(inv)


def spd_inverse(A, context: str = "") -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky; the result is exactly symmetric."""
    inv = inverse_from_cholesky(cholesky(A, context))
    return check_finite(inv, "spd_inverse")


def rel_fro(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_F / ||b||_F (absolute when b is zero)."""
    denom = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    return float(diff / denom) if denom > 0 else float(diff)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))
