"""OBS scoring and the exact greedy pruner (one weight at a time, per row)."""

from __future__ import annotations

import numpy as np

from ..matrixcore import spd_inverse
from ..objectives import HessianBundle, combined_block, eval_losses
from .patterns import Kind, SparsityPattern, zero_count
from .result import PruneResult, timed


def obs_step(w: np.ndarray, G: np.ndarray, candidates: np.ndarray | None = None):
    """Cheapest single weight to remove and the compensating update.

    Returns ``(p, delta, score)`` with ``p = argmin w_p^2 / G_pp`` over the
    candidates (lowest index on ties), ``delta = -(w_p / G_pp) G[:, p]`` and
    ``score = w_p^2 / G_pp``, the exact increase of the quadratic objective.
    """
    w = np.asarray(w, dtype=np.float64)
    diag = np.diag(G)
    cand = np.ones(w.shape[0], dtype=bool) if candidates is None else np.asarray(candidates, bool)
    if not cand.any():
        raise ValueError("no candidate weights left")
    if (diag[cand] <= 0).any():
        bad = int(np.flatnonzero(cand & (diag <= 0))[0])
        raise ValueError(f"inverse Hessian diagonal at {bad} is not positive ({diag[bad]})")
    scores = np.full(w.shape[0], np.inf)
    scores[cand] = w[cand] ** 2 / diag[cand]
    p = int(np.argmin(scores))
    delta = -(w[p] / diag[p]) * G[:, p]
    return p, delta, float(scores[p])


def _eliminate(G: np.ndarray, p: int) -> None:
    # inverse of F restricted to the support minus p, in place; row/col p zeroed
    g = G[:, p].copy()
    G -= np.outer(g, g) / g[p]
    G[p, :] = 0.0
    G[:, p] = 0.0


def obs_greedy_prune(w_hat, F, keep: int, nm: tuple[int, int] | None = None,
                     G: np.ndarray | None = None, return_mask: bool = False):
    """Remove ``d - keep`` weights of one row greedily by OBS score.

    With ``nm=(n, m)`` only weights whose aligned group still has fewer than
    n zeros are candidates (``keep`` must then equal ``d - n*d/m``).
    ``G`` may be passed when ``F^{-1}`` is already known. With
    ``return_mask`` the kept-support mask is returned as well.
    """
    w = np.array(w_hat, dtype=np.float64)
    d = w.shape[0]
    if not 0 <= keep <= d:
        raise ValueError(f"keep={keep} outside [0, {d}]")
    if nm is not None:
        n, m = nm
        if d % m or keep != d - n * (d // m):
            raise ValueError(f"keep={keep} inconsistent with {n}:{m} on d={d}")
    G = spd_inverse(F) if G is None else np.array(G, dtype=np.float64)
    active = np.ones(d, dtype=bool)
    group_zeros = None if nm is None else np.zeros(d // nm[1], dtype=np.int64)
    for _ in range(d - keep):
        cand = active
        if group_zeros is not None:
            cand = active & np.repeat(group_zeros < nm[0], nm[1])
        p, delta, _ = obs_step(w, G, cand)
        w += delta
        w[p] = 0.0
        w[~active] = 0.0
        _eliminate(G, p)
        active[p] = False
        if group_zeros is not None:
            group_zeros[p // nm[1]] += 1
    return (w, active) if return_mask else w


def obs_greedy_layer(W_hat, bundle: HessianBundle, pattern: SparsityPattern,
                     seed: int = 0) -> PruneResult:
    """Exact per-row greedy OBS on every F_k (budget applied per row)."""
    W_hat = np.asarray(W_hat, dtype=np.float64)
    d_out, d_in = W_hat.shape
    pattern.validate(d_in)
    timings: dict[str, float] = {}
    if pattern.kind is Kind.UNSTRUCTURED:
        keep, nm = d_in - zero_count(pattern.ratio, d_in), None
    elif pattern.kind is Kind.NM:
        keep, nm = d_in - pattern.n * (d_in // pattern.m), (pattern.n, pattern.m)
    else:
        raise ValueError("obs-greedy supports unstructured and n:m patterns; use osscar for columns")
    W = np.empty_like(W_hat)
    mask = np.empty(W_hat.shape, dtype=bool)
    with timed(timings, "total"):
        for k in range(d_out):
            W[k], mask[k] = obs_greedy_prune(W_hat[k], combined_block(bundle, k), keep, nm,
                                             return_mask=True)
    return PruneResult(mask, W, eval_losses(W, W_hat, bundle), "obs-greedy", bundle.lam, pattern,
                       rows_per_group=1, seed=seed, timings=timings, flags=list(bundle.flags))

