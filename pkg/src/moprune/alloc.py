"""Per-layer sparsity allocation: uniform, or read from an external table."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .pruners.patterns import Kind, SparsityPattern

log = logging.getLogger(__name__)

MEAN_TOL = 1e-6


@dataclass(frozen=True)
class LayerInfo:
    name: str
    d_out: int
    d_in: int

    @property
    def params(self) -> int:
        return self.d_out * self.d_in


def layer_infos(net) -> list[LayerInfo]:
    return [LayerInfo(f"layer{i}", l.d_out, l.d_in) for i, l in enumerate(net.layers)]


@dataclass(frozen=True)
class AllocationPlan:
    layers: tuple[LayerInfo, ...]
    patterns: tuple[SparsityPattern, ...]
    target: float

    def pattern_for(self, name: str) -> SparsityPattern:
        for info, pat in zip(self.layers, self.patterns):
            if info.name == name:
                return pat
        raise KeyError(f"no allocation for layer {name!r}")

    @property
    def ratios(self) -> list[float]:
        return [p.ratio_for(l.d_in) for l, p in zip(self.layers, self.patterns)]

    @property
    def global_ratio(self) -> float:
        """Parameter-weighted mean of the per-layer ratios."""
        total = sum(l.params for l in self.layers)
        return sum(r * l.params for r, l in zip(self.ratios, self.layers)) / total

    @property
    def on_target(self) -> bool:
        return abs(self.global_ratio - self.target) <= MEAN_TOL


def uniform_alloc(target: float | SparsityPattern, layers: Sequence[LayerInfo]) -> AllocationPlan:
    """Every layer gets the same pattern (a bare float means unstructured)."""
    pat = target if isinstance(target, SparsityPattern) else SparsityPattern.unstructured(target)
    layers = tuple(layers)
    patterns = tuple(pat for _ in layers)
    if pat.kind is Kind.COLUMNS and layers:
        # a column count means a different ratio per layer width
        return AllocationPlan(layers, patterns, AllocationPlan(layers, patterns, 0.0).global_ratio)
    return AllocationPlan(layers, patterns, pat.ratio_for(1) if pat.kind is not Kind.COLUMNS else 0.0)


def table_alloc(table: Mapping[str, float | str], layers: Sequence[LayerInfo],
                target: float | None = None) -> AllocationPlan:
    """Plan from a ``name -> ratio`` (or pattern string) map.

    ``target`` defaults to the table's own weighted mean; when given and the
    mean misses it by more than 1e-6 a warning is logged.
    """
    layers = tuple(layers)
    pats = []
    for info in layers:
        if info.name not in table:
            raise KeyError(f"allocation table has no entry for layer {info.name!r}")
        value = table[info.name]
        pats.append(SparsityPattern.unstructured(float(value)) if isinstance(value, (int, float))
                    else SparsityPattern.parse(value))
    extra = sorted(set(table) - {l.name for l in layers})
    if extra:
        log.warning("allocation table entries for unknown layers ignored: %s", extra)
    plan = AllocationPlan(layers, tuple(pats), 0.0)
    mean = plan.global_ratio
    if target is None:
        target = mean
    elif abs(mean - target) > MEAN_TOL:
        log.warning("allocation mean %.6f differs from target %.6f", mean, target)
    return AllocationPlan(layers, plan.patterns, float(target))


def load_table(path) -> dict[str, float | str]:
    table = json.loads(Path(path).read_text())
    if not isinstance(table, dict):
        raise ValueError(f"{path}: allocation table must be a JSON object")
    return table


def achieved_ratio(mask) -> float:
    """Fraction of zeros in a keep-mask (for checking a plan after pruning)."""
    return (mask.size - int(mask.sum())) / mask.size
