"""Per-row inverses G_k = F_k^{-1} of the blended objective.

All rows share the base ``B = (lam/rho_R) XX^T + mu I`` and differ by a
rank-N term ``c A_k A_k^T``.  The Woodbury route inverts B once and then
solves one N x N system per row:

    G_k = J0 - c J0 A_k (I_N + c A_k^T J0 A_k)^{-1} A_k^T J0,   J0 = B^{-1}

The direct route materializes every F_k and inverts it via Cholesky.
Both write each G_k into its slot of one preallocated stack.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import blas, lapack

from .matrixcore import NotPositiveDefinite, NumericalError, check_finite, mirror_lower, mirror_upper, spd_inverse
from .objectives import HessianBundle


class Method(str, enum.Enum):
    WOODBURY = "woodbury"
    DIRECT = "direct"
    AUTO = "auto"


class BaseNotInvertible(NumericalError):
    pass


@dataclass
class InverseSet:
    blocks: list[np.ndarray]
    method_used: Method
    rows: list[int] = field(default_factory=list)
    chol: list[np.ndarray] | None = None  # upper U_k with G_k = U_k^T U_k
    n_inversions: int = 0
    wall_s: float = 0.0

    def stacked(self) -> np.ndarray:
        return np.stack(self.blocks)


def base_inverse(bundle: HessianBundle, k: int = 0) -> np.ndarray:
    """J0 = ((lam/rho_R) XX^T + mu_k I)^{-1}."""
    try:
        return spd_inverse(bundle.base(k))
    except NotPositiveDefinite as exc:
        raise BaseNotInvertible(f"base not invertible; increase damping ({exc})") from exc


@dataclass(frozen=True)
class LowRankBase:
    """J0 = (I - Q diag(w) Q^T) / mu for a base whose Gram part has rank r << d."""

    Q: np.ndarray  # d x r, orthonormal columns
    w: np.ndarray  # (r,) e / (e + mu) for the nonzero eigenvalues e
    mu: float

    def apply_t(self, A: np.ndarray) -> np.ndarray:
        """(J0 A)^T as a C-ordered N x d array, in O(d r N) instead of O(d^2 N)."""
        T = self.Q.T @ A  # r x N
        T *= self.w[:, None]
        P = T.T @ self.Q.T  # N x d
        np.subtract(A.T, P, out=P)
        P /= self.mu
        return P


def low_rank_base(bundle: HessianBundle, max_fraction: float = 0.25) -> LowRankBase | None:
    """Spectral form of J0 when the scaled Gram matrix has numerical rank <= max_fraction * d."""
    mu = float(bundle.mu[0])
    if not bundle.shared_base or mu <= 0.0 or bundle.recon_coef == 0.0:
        return None
    e, V = np.linalg.eigh(bundle.recon_coef * bundle.gramX)
    keep = e > bundle.d_in * np.finfo(np.float64).eps * max(e[-1], 0.0)
    r = int(keep.sum())
    if r > max_fraction * bundle.d_in:
        return None
    return LowRankBase(np.ascontiguousarray(V[:, keep]), e[keep] / (e[keep] + mu), mu)


def woodbury_block_inverse(J0: np.ndarray, A: np.ndarray, c: float,
                           out: np.ndarray | None = None,
                           low_rank: LowRankBase | None = None) -> np.ndarray:
    """(J0^{-1} + c A A^T)^{-1} via an N x N Cholesky solve.

    Returns ``J0`` itself when the correction vanishes (c == 0 or A == 0)
    and no ``out`` is given.  Temporaries: J0 A (d x N) and one N x N
    matrix; the factor and the triangular solve overwrite them in place.
    ``out`` (C-ordered d x d) receives the result when given; ``low_rank``
    is the same J0 in spectral form, used for the product J0 A.
    """
    if c < 0:
        raise ValueError("c must be >= 0")
    if c == 0.0 or not A.any():
        if out is None:
            return J0
        np.copyto(out, J0)
        return out
    d, N = A.shape
    # N x d, C order; UT.T is J0 A in Fortran order (J0 symmetric)
    UT = A.T @ J0 if low_rank is None else low_rank.apply_t(A)
    S = UT @ A
    S *= c
    S[np.diag_indices(N)] += 1.0
    # S is symmetric, so its C buffer is also a valid Fortran buffer for S
    L, info = lapack.dpotrf(S.T, lower=1, overwrite_a=1)
    if info != 0:
        raise NumericalError(f"Woodbury inner {N}x{N} matrix not positive definite "
                             f"(pivot {info - 1}); retry with the direct method")
    Y = blas.dtrsm(1.0, L, UT.T, side=1, lower=1, trans_a=1, overwrite_b=1)  # J0 A L^{-T}, d x N
    G = np.empty((d, d)) if out is None else out
    np.copyto(G, J0)
    # G = J0 - c Y Y^T on the upper triangle of G's Fortran view (its C lower
    # triangle), written in place; J0 symmetric makes the Fortran view valid
    blas.dsyrk(-c, Y, beta=1.0, c=G.T, trans=0, lower=0, overwrite_c=1)
    return mirror_lower(G)


def direct_block_inverse(bundle: HessianBundle, k: int, recon: np.ndarray,
                         out: np.ndarray | None = None) -> np.ndarray:
    """F_k^{-1} by building F_k in place and inverting it through its Cholesky factor.

    ``recon`` is the shared (lam/rho_R) XX^T.
    """
    d = bundle.d_in
    F = np.empty((d, d)) if out is None else out
    np.copyto(F, recon)
    F[np.diag_indices(d)] += bundle.mu[k]
    c = bundle.fisher_coef
    if c != 0.0:
        # lower triangle of the Fortran view, i.e. the C upper triangle
        blas.dsyrk(c, bundle.factor(k).T, beta=1.0, c=F.T, trans=1, lower=1, overwrite_c=1)
    L, info = lapack.dpotrf(F.T, lower=1, overwrite_a=1)
    if info != 0:
        raise NotPositiveDefinite(info - 1, f"block {k}")
    _, info = lapack.dpotri(L, lower=1, overwrite_c=1)
    if info != 0:
        raise NotPositiveDefinite(info - 1, f"block {k} potri")
    return check_finite(mirror_upper(F), f"block {k}")


def choose_method(bundle: HessianBundle, method: Method | str, n_rows: int) -> Method:
    method = Method(method)
    if method is not Method.AUTO:
        return method
    rank = bundle.n_samples * (1 if bundle.partition is None else len(bundle.partition))
    if bundle.shared_base and rank <= bundle.d_in / 2 and n_rows >= 4:
        return Method.WOODBURY
    return Method.DIRECT


def invert_all(bundle: HessianBundle, method: Method | str = Method.AUTO,
               rows: Sequence[int] | None = None, with_chol: bool = False) -> InverseSet:
    """G_k for every requested row (all rows by default), in row order."""
    rows = list(range(bundle.d_out)) if rows is None else list(rows)
    used = choose_method(bundle, method, len(rows))
    t0 = time.perf_counter()
    c = bundle.fisher_coef
    n_inv = 0

    if c == 0.0 and bundle.shared_base:
        # every F_k is the same matrix: invert once, hand out references
        shared = base_inverse(bundle)
        blocks = [shared] * len(rows)
        n_inv = 1
    else:
        # one allocation for all results instead of one page-faulted matrix per row
        stack = np.empty((len(rows), bundle.d_in, bundle.d_in))
        blocks = list(stack)
        if used is Method.WOODBURY:
            if not bundle.shared_base:
                raise ValueError("Woodbury needs a damping value shared by all rows; use direct")
            J0 = base_inverse(bundle)
            low_rank = low_rank_base(bundle)
            n_inv = 1
            for i, k in enumerate(rows):
                try:
                    woodbury_block_inverse(J0, bundle.factor(k), c, out=blocks[i], low_rank=low_rank)
                except NumericalError as exc:
                    raise NumericalError(f"block {k}: {exc}") from exc
                n_inv += 1
        else:
            recon = bundle.recon_coef * bundle.gramX
            for i, k in enumerate(rows):
                direct_block_inverse(bundle, k, recon, out=blocks[i])
                n_inv += 1

    chol = None
    if with_chol:
        chol = []
        cache: dict[int, np.ndarray] = {}
        for k, G in zip(rows, blocks):
            key = id(G)
            if key not in cache:
                Lc, info = lapack.dpotrf(G, lower=1, clean=1)
                if info != 0:
                    raise NotPositiveDefinite(info - 1, f"cholesky of G_{k}")
                cache[key] = np.ascontiguousarray(Lc.T)
            chol.append(cache[key])
    return InverseSet(blocks, used, rows, chol, n_inv, time.perf_counter() - t0)
