"""Diagonal-approximation pruning: score each weight, keep the top ones, no update."""

from __future__ import annotations

import numpy as np

from ..objectives import HessianBundle, eval_losses
from .patterns import Kind, SparsityPattern, select_mask
from .result import PruneResult, timed


def diagonal_scores(W_hat, bundle: HessianBundle) -> np.ndarray:
    """w_kc^2 times the undamped diagonal of F_k at c."""
    W_hat = np.asarray(W_hat, dtype=np.float64)
    diag = np.zeros_like(W_hat)
    if bundle.recon_coef:
        diag += bundle.recon_coef * np.diag(bundle.gramX)[None, :]
    if bundle.fisher_coef:
        diag += bundle.fisher_coef * np.einsum("kin,kin->ki", bundle.A, bundle.A)
    return W_hat ** 2 * diag


def wanda_prune(W_hat, bundle: HessianBundle, pattern: SparsityPattern,
                rows_per_group: int | None = 1, seed: int = 0) -> PruneResult:
    """Mask by diagonal scores per row (or per group of rows); kept weights unchanged.

    Damping never enters the scores.
    """
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if pattern.kind is Kind.COLUMNS:
        raise ValueError("column patterns are handled by osscar_prune")
    timings: dict[str, float] = {}
    with timed(timings, "total"):
        mask = select_mask(diagonal_scores(W_hat, bundle), pattern, rows_per_group)
        W = W_hat * mask
    return PruneResult(mask, W, eval_losses(W, W_hat, bundle), "wanda", bundle.lam, pattern,
                       rows_per_group=rows_per_group, seed=seed, timings=timings,
                       flags=list(bundle.flags))
