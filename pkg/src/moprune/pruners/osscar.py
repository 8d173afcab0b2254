"""Structured column removal: greedy aggregate OBS plus an exact backsolve."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..hinv import invert_all
from ..matrixcore import NotPositiveDefinite, NumericalError, cholesky
from ..objectives import HessianBundle, combined_block, eval_losses
from .patterns import SparsityPattern
from .result import PrunerConfig, PruneResult, timed


def backsolve(W_hat, bundle: HessianBundle, S: Sequence[int]) -> np.ndarray:
    """Optimal weights on the kept columns ``S`` for every row.

    Row k solves ``[F_k]_{S,S} w_S = [F_k]_{S,:} w_hat_k``; entries outside S
    are zero.
    """
    W_hat = np.asarray(W_hat, dtype=np.float64)
    S = np.asarray(sorted(S), dtype=np.int64)
    W = np.zeros_like(W_hat)
    if S.size == 0:
        return W
    if bundle.fisher_coef == 0.0 and bundle.shared_base:
        F = combined_block(bundle, 0)
        try:
            fac = cholesky(F[np.ix_(S, S)])
        except NotPositiveDefinite as exc:
            raise NumericalError(f"restricted block singular for all rows, S={S.tolist()}: {exc}") from exc
        rhs = F[S] @ W_hat.T  # |S| x d_out
        W[:, S] = fac.solve(rhs).T
        return W
    for k in range(W_hat.shape[0]):
        F = combined_block(bundle, k)
        try:
            fac = cholesky(F[np.ix_(S, S)])
        except NotPositiveDefinite as exc:
            raise NumericalError(f"restricted block singular at row {k}, S={S.tolist()}: {exc}") from exc
        W[k, S] = fac.solve(F[S] @ W_hat[k])
    return W


def greedy_columns(W_hat, G: np.ndarray, n_prune: int) -> tuple[list[int], np.ndarray]:
    """Remove ``n_prune`` columns one at a time by aggregate OBS score.

    ``G`` is (K, d, d) with K = d_out, or (1, d, d) when every row shares the
    same inverse; it is modified in place.  Returns the removed columns in
    removal order and the OBS-updated weights.
    """
    W = np.array(W_hat, dtype=np.float64)
    K, d = W.shape
    shared = G.shape[0] == 1
    alive = np.ones(d, dtype=bool)
    removed: list[int] = []
    for _ in range(n_prune):
        diag = np.diagonal(G, axis1=1, axis2=2)  # (K or 1, d)
        live = diag[:, alive]
        if (live <= 0).any():
            raise NumericalError("inverse Hessian diagonal not positive during column removal")
        scores = np.full(d, np.inf)
        scores[alive] = np.sum(W[:, alive] ** 2 / live, axis=0)
        j = int(np.argmin(scores))
        for k in range(K):
            g = G[0 if shared else k, :, j]
            W[k] -= (W[k, j] / g[j]) * g
        W[:, j] = 0.0
        for Gk in G:
            g = Gk[:, j].copy()
            Gk -= np.outer(g, g / g[j])
            Gk[j, :] = 0.0
            Gk[:, j] = 0.0
        alive[j] = False
        removed.append(j)
    W[:, ~alive] = 0.0
    return removed, W


def osscar_prune(W_hat, bundle: HessianBundle, n_prune: int | SparsityPattern,
                 cfg: PrunerConfig | None = None) -> PruneResult:
    """Zero ``n_prune`` whole input columns, then refit the rest exactly."""
    cfg = cfg or PrunerConfig()
    W_hat = np.asarray(W_hat, dtype=np.float64)
    d_out, d_in = W_hat.shape
    pattern = n_prune if isinstance(n_prune, SparsityPattern) else SparsityPattern.columns(n_prune)
    pattern.validate(d_in)
    timings: dict[str, float] = {}
    with timed(timings, "hinv"):
        inv = invert_all(bundle, cfg.hinv_method)
        if all(g is inv.blocks[0] for g in inv.blocks):
            G = inv.blocks[0].copy()[None]
        else:
            G = np.stack(inv.blocks)
        del inv
    with timed(timings, "greedy"):
        removed, _ = greedy_columns(W_hat, G, pattern.n_prune)
    del G
    keep_cols = np.setdiff1d(np.arange(d_in), removed)
    with timed(timings, "backsolve"):
        W = backsolve(W_hat, bundle, keep_cols)
    mask = np.zeros_like(W_hat, dtype=bool)
    mask[:, keep_cols] = True
    return PruneResult(mask, W, eval_losses(W, W_hat, bundle), "osscar", bundle.lam, pattern,
                       rows_per_group=None, seed=cfg.seed, timings=timings, flags=list(bundle.flags))
