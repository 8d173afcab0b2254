from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..objectives import Losses
from ..serialize import read_tensors, write_tensors
from .patterns import SparsityPattern

SCORE_DENOMINATORS = ("chol-squared", "hinv-diag")


@dataclass
class PrunerConfig:
    """Blocking parameters of the column sweep.

    B: lazy-batch column block; Bs: mask-selection block; Kp: rows pruned per
    pass (None: all rows). B and Bs default to min(128, d_in) and min(16, B).
    """

    B: int | None = None
    Bs: int | None = None
    Kp: int | None = None
    seed: int = 0
    score_denominator: str = "chol-squared"
    hinv_method: str = "auto"
    check_frozen: bool = False

    def resolve(self, d_out: int, d_in: int) -> tuple[int, int, int]:
        B = min(128, d_in) if self.B is None else self.B
        if self.Bs is None:
            Bs = min(16, B)
            if B % Bs:
                Bs = math.gcd(B, 16)
        else:
            Bs = self.Bs
        Kp = d_out if self.Kp is None else self.Kp
        if not 1 <= B <= d_in:
            raise ValueError(f"B={B} must be in [1, d_in={d_in}]")
        if Bs < 1 or B % Bs:
            raise ValueError(f"Bs={Bs} must divide B={B}")
        if not 1 <= Kp <= d_out:
            raise ValueError(f"Kp={Kp} must be in [1, d_out={d_out}]")
        if self.score_denominator not in SCORE_DENOMINATORS:
            raise ValueError(f"score_denominator must be one of {SCORE_DENOMINATORS}")
        return B, Bs, Kp


@dataclass
class PruneResult:
    mask: np.ndarray  # bool, True = kept
    W: np.ndarray
    losses: Losses
    method: str
    lam: float
    pattern: SparsityPattern
    rows_per_group: int | None = 1
    seed: int = 0
    timings: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "method": self.method,
            "lambda": self.lam,
            "pattern": str(self.pattern),
            "losses": {"L_R": self.losses.L_R, "L_F": self.losses.L_F, "L_lambda": self.losses.L_lambda},
            "timings": self.timings,
            "seed": self.seed,
            "flags": self.flags,
        }

    def save(self, path) -> None:
        """MSPR tensors ``W`` and ``mask`` at ``path`` plus a ``.json`` sidecar next to it."""
        path = Path(path)
        write_tensors(path, {"W": self.W, "mask": self.mask.astype(np.float64)})
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load_arrays(path) -> tuple[np.ndarray, np.ndarray]:
        t = read_tensors(path)
        return t["W"], t["mask"] > 0.5


@contextmanager
def timed(timings: dict[str, float], phase: str):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        timings[phase] = timings.get(phase, 0.0) + time.perf_counter() - t0
