"""Column sweep with per-row inverse Hessians and lazy batch updates.

Rows are processed in blocks of ``Kp``.  Each row k has its own upper
Cholesky factor U_k of G_k = F_k^{-1} (G_k = U_k^T U_k).  Columns are visited
left to right; every ``Bs`` columns (every ``m`` for n:m) a mask is chosen
for the next window from ``w^2 / U_cc^2``, the error of each pruned weight is
pushed onto the not-yet-visited columns of its row, and the updates beyond
the current lazy block of ``B`` columns are applied once per block.
"""

from __future__ import annotations

import numpy as np

from ..hinv import invert_all
from ..objectives import HessianBundle, eval_losses
from .patterns import Kind, MaskError, SparsityPattern, zero_count
from .result import PrunerConfig, PruneResult, timed


class FrozenWeightViolation(MaskError):
    """A column changed after the sweep had already processed it."""


def _window_scores(W: np.ndarray, den: np.ndarray, a: int, b: int) -> np.ndarray:
    return W[:, a:b] ** 2 / den[:, a:b]


def _unstructured_window(scores: np.ndarray, n_zero: int) -> np.ndarray:
    keep = np.ones(scores.size, dtype=bool)
    keep[np.argsort(scores.reshape(-1), kind="stable")[:n_zero]] = False
    return keep.reshape(scores.shape)


def _nm_window(scores: np.ndarray, n: int) -> np.ndarray:
    keep = np.ones(scores.shape, dtype=bool)
    idx = np.argsort(scores, axis=1, kind="stable")[:, :n]
    np.put_along_axis(keep, idx, False, axis=1)
    return keep


def _sweep_block(W: np.ndarray, U: np.ndarray, den: np.ndarray, pattern: SparsityPattern,
                 B: int, Bs: int, check_frozen: bool) -> np.ndarray:
    """Prune the rows of ``W`` in place; ``U`` is (d, d) when shared or (R, d, d)."""
    R, d = W.shape
    shared = U.ndim == 2
    keep = np.ones((R, d), dtype=bool)
    snapshot = np.empty_like(W) if check_frozen else None
    for i1 in range(0, d, B):
        i2 = min(i1 + B, d)
        Err = np.zeros((R, i2 - i1))
        for j in range(i1, i2):
            if pattern.kind is Kind.UNSTRUCTURED and j % Bs == 0:
                b = min(j + Bs, d)
                # cumulative rounding keeps the block total exact
                nz = zero_count(pattern.ratio, R * b) - zero_count(pattern.ratio, R * j)
                keep[:, j:b] = _unstructured_window(_window_scores(W, den, j, b), nz)
            elif pattern.kind is Kind.NM and j % pattern.m == 0:
                b = j + pattern.m
                keep[:, j:b] = _nm_window(_window_scores(W, den, j, b), pattern.n)
            Uj = U[j] if shared else U[:, j]
            diag = Uj[j] if shared else Uj[:, j]
            E = np.where(keep[:, j], 0.0, W[:, j] / diag)
            Err[:, j - i1] = E
            if shared:
                W[:, j:i2] -= np.outer(E, Uj[j:i2])
            else:
                W[:, j:i2] -= E[:, None] * Uj[:, j:i2]
            if snapshot is not None:
                snapshot[:, j] = W[:, j]
        if i2 < d:
            if shared:
                W[:, i2:] -= Err @ U[i1:i2, i2:]
            else:
                W[:, i2:] -= np.einsum("ri,rij->rj", Err, U[:, i1:i2, i2:])
        if snapshot is not None and not np.array_equal(snapshot[:, :i2], W[:, :i2]):
            cols = np.flatnonzero((snapshot[:, :i2] != W[:, :i2]).any(axis=0))
            raise FrozenWeightViolation(f"columns {cols.tolist()} changed after being processed")
    W *= keep
    return keep


def sparsegpt_prune(W_hat, bundle: HessianBundle, pattern: SparsityPattern,
                    cfg: PrunerConfig | None = None) -> PruneResult:
    """Prune one layer to ``pattern`` minimizing the blended per-row objective."""
    cfg = cfg or PrunerConfig()
    W_hat = np.asarray(W_hat, dtype=np.float64)
    d_out, d_in = W_hat.shape
    if pattern.kind is Kind.COLUMNS:
        raise ValueError("column patterns are handled by osscar_prune")
    pattern.validate(d_in)
    B, Bs, Kp = cfg.resolve(d_out, d_in)
    if pattern.kind is Kind.NM and B % pattern.m:
        raise ValueError(f"B={B} must be a multiple of m={pattern.m} for n:m patterns")

    timings: dict[str, float] = {}
    W = W_hat.copy()
    mask = np.ones_like(W, dtype=bool)
    for r0 in range(0, d_out, Kp):
        rows = list(range(r0, min(r0 + Kp, d_out)))
        with timed(timings, "hinv"):
            inv = invert_all(bundle, cfg.hinv_method, rows=rows, with_chol=True)
            if all(u is inv.chol[0] for u in inv.chol):
                U = inv.chol[0]
                Gdiag = np.broadcast_to(np.diag(inv.blocks[0]), (len(rows), d_in))
            else:
                U = np.stack(inv.chol)
                Gdiag = np.stack([np.diag(g) for g in inv.blocks])
            del inv
        if cfg.score_denominator == "chol-squared":
            Ud = np.diag(U) if U.ndim == 2 else np.diagonal(U, axis1=1, axis2=2)
            den = np.broadcast_to(Ud ** 2, (len(rows), d_in))
        else:
            den = Gdiag
        with timed(timings, "sweep"):
            block = W[r0:r0 + len(rows)]
            mask[r0:r0 + len(rows)] = _sweep_block(block, U, den, pattern, B, Bs, cfg.check_frozen)
    return PruneResult(mask, W, eval_losses(W, W_hat, bundle), "sparsegpt", bundle.lam, pattern,
                       rows_per_group=Kp, seed=cfg.seed, timings=timings, flags=list(bundle.flags))
