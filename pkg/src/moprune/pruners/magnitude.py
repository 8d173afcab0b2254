"""Magnitude baseline: drop the smallest |w| per pattern, no update."""

from __future__ import annotations

import numpy as np

from ..objectives import HessianBundle, Losses, eval_losses
from .patterns import Kind, SparsityPattern, select_mask
from .result import PruneResult, timed


def magnitude_prune(W, pattern: SparsityPattern, bundle: HessianBundle | None = None,
                    rows_per_group: int | None = 1, seed: int = 0) -> PruneResult:
    """Column patterns rank columns by their squared L2 norm.

    Losses are evaluated against ``bundle`` when given; otherwise all three
    report the squared norm of the removed weights.
    """
    W = np.asarray(W, dtype=np.float64)
    timings: dict[str, float] = {}
    with timed(timings, "total"):
        scores = W ** 2
        mask = select_mask(scores, pattern, rows_per_group)
        W_pruned = W * mask
    if bundle is not None:
        losses = eval_losses(W_pruned, W, bundle)
        lam, flags = bundle.lam, list(bundle.flags)
    else:
        removed = float(np.sum(scores[~mask]))
        losses, lam, flags = Losses(removed, removed, removed), float("nan"), ["no-bundle"]
    rpg = None if pattern.kind is Kind.COLUMNS else rows_per_group
    return PruneResult(mask, W_pruned, losses, "magnitude", lam, pattern, rows_per_group=rpg,
                       seed=seed, timings=timings, flags=flags)
