"""Sparsity patterns and mask selection from per-weight scores."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..matrixcore import round_half_up


class Kind(str, enum.Enum):
    UNSTRUCTURED = "unstructured"
    NM = "nm"
    COLUMNS = "columns"


class MaskError(AssertionError):
    pass


@dataclass(frozen=True)
class SparsityPattern:
    """Unstructured(ratio), NM(n zeroed out of every m), or StructuredColumns(n_prune)."""

    kind: Kind
    ratio: float = 0.0
    n: int = 0
    m: int = 0
    n_prune: int = 0

    @classmethod
    def unstructured(cls, ratio: float) -> "SparsityPattern":
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"sparsity ratio {ratio} outside [0, 1]")
        return cls(Kind.UNSTRUCTURED, ratio=float(ratio))

    @classmethod
    def nm(cls, n: int, m: int) -> "SparsityPattern":
        if m < 1 or not 0 <= n <= m:
            raise ValueError(f"invalid n:m pattern {n}:{m}")
        return cls(Kind.NM, n=int(n), m=int(m))

    @classmethod
    def columns(cls, n_prune: int) -> "SparsityPattern":
        if n_prune < 0:
            raise ValueError("n_prune must be >= 0")
        return cls(Kind.COLUMNS, n_prune=int(n_prune))

    @classmethod
    def parse(cls, text: str) -> "SparsityPattern":
        """'0.6' or 'unstructured:0.6'; '2:4'; 'cols:3' or 'columns:3'."""
        text = str(text).strip()
        head, _, tail = text.partition(":")
        if head in ("cols", "columns"):
            return cls.columns(int(tail))
        if head == "unstructured":
            return cls.unstructured(float(tail))
        if tail:
            return cls.nm(int(head), int(tail))
        return cls.unstructured(float(head))

    def __str__(self) -> str:
        if self.kind is Kind.UNSTRUCTURED:
            return f"{self.ratio:g}"
        if self.kind is Kind.NM:
            return f"{self.n}:{self.m}"
        return f"cols:{self.n_prune}"

    def validate(self, d_in: int) -> None:
        if self.kind is Kind.NM and d_in % self.m:
            raise ValueError(f"d_in={d_in} not divisible by m={self.m}")
        if self.kind is Kind.COLUMNS and self.n_prune >= d_in:
            raise ValueError(f"n_prune={self.n_prune} must be < d_in={d_in}")

    def ratio_for(self, d_in: int) -> float:
        if self.kind is Kind.UNSTRUCTURED:
            return self.ratio
        if self.kind is Kind.NM:
            return self.n / self.m
        return self.n_prune / d_in


def zero_count(ratio: float, count: int) -> int:
    """Number of zeros for a ratio over ``count`` weights (round half up)."""
    return round_half_up(ratio * count)


def _lowest(scores: np.ndarray, count: int) -> np.ndarray:
    # stable sort: ties resolved toward the lowest index
    return np.argsort(scores, kind="stable")[:count]


def select_mask(scores: np.ndarray, pattern: SparsityPattern,
                rows_per_group: int | None = 1) -> np.ndarray:
    """Keep-mask (True = kept) that zeroes the lowest scores per the pattern.

    Unstructured budgets apply within groups of ``rows_per_group`` consecutive
    rows (``None``: the whole matrix).
    """
    scores = np.asarray(scores, dtype=np.float64)
    d_out, d_in = scores.shape
    pattern.validate(d_in)
    keep = np.ones_like(scores, dtype=bool)
    if pattern.kind is Kind.UNSTRUCTURED:
        R = d_out if rows_per_group is None else rows_per_group
        for r0 in range(0, d_out, R):
            block = scores[r0:r0 + R]
            nz = zero_count(pattern.ratio, block.size)
            flat = keep[r0:r0 + R].reshape(-1)
            flat[_lowest(block.reshape(-1), nz)] = False
            keep[r0:r0 + R] = flat.reshape(block.shape)
    elif pattern.kind is Kind.NM:
        for g in range(0, d_in, pattern.m):
            grp = scores[:, g:g + pattern.m]
            idx = np.argsort(grp, axis=1, kind="stable")[:, :pattern.n]
            np.put_along_axis(keep[:, g:g + pattern.m], idx, False, axis=1)
    else:
        col = scores.sum(axis=0)
        keep[:, _lowest(col, pattern.n_prune)] = False
    return keep


def check_mask(keep: np.ndarray, pattern: SparsityPattern, rows_per_group: int | None = 1) -> None:
    """Raise MaskError unless ``keep`` satisfies the pattern's exact counts."""
    keep = np.asarray(keep, dtype=bool)
    d_out, d_in = keep.shape
    if pattern.kind is Kind.UNSTRUCTURED:
        R = d_out if rows_per_group is None else rows_per_group
        for r0 in range(0, d_out, R):
            block = keep[r0:r0 + R]
            want = zero_count(pattern.ratio, block.size)
            got = int(block.size - block.sum())
            if got != want:
                raise MaskError(f"rows {r0}:{r0 + block.shape[0]}: {got} zeros, expected {want}")
    elif pattern.kind is Kind.NM:
        if d_in % pattern.m:
            raise MaskError(f"d_in={d_in} not divisible by m={pattern.m}")
        ones = keep.reshape(d_out, d_in // pattern.m, pattern.m).sum(axis=2)
        bad = np.argwhere(ones != pattern.m - pattern.n)
        if bad.size:
            r, g = bad[0]
            raise MaskError(f"row {r} group {g}: {ones[r, g]} kept, expected {pattern.m - pattern.n}")
    else:
        if not (keep == keep[0:1]).all():
            raise MaskError("structured mask is not constant down columns")
        zero_cols = int((~keep[0]).sum())
        if zero_cols != pattern.n_prune:
            raise MaskError(f"{zero_cols} zero columns, expected {pattern.n_prune}")
