"""Pruning algorithms producing masks and updated weights for a sparsity pattern."""

from .magnitude import magnitude_prune
from .obs import obs_greedy_layer, obs_greedy_prune, obs_step
from .osscar import backsolve, greedy_columns, osscar_prune
from .patterns import Kind, MaskError, SparsityPattern, check_mask, select_mask, zero_count
from .result import SCORE_DENOMINATORS, PrunerConfig, PruneResult
from .sparsegpt import FrozenWeightViolation, sparsegpt_prune
from .wanda import diagonal_scores, wanda_prune

__all__ = [
    "FrozenWeightViolation", "Kind", "MaskError", "PruneResult", "PrunerConfig",
    "SCORE_DENOMINATORS", "SparsityPattern", "backsolve", "check_mask", "diagonal_scores",
    "greedy_columns", "magnitude_prune", "obs_greedy_layer", "obs_greedy_prune", "obs_step",
    "osscar_prune", "select_mask", "sparsegpt_prune", "wanda_prune", "zero_count",
]
