"""Timing of the Woodbury and direct routes to every per-row inverse."""

from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass

import numpy as np

from .hinv import Method, invert_all
from .objectives import HessianBundle, ObjectiveSpec, build_bundle, combined_block
from .toynet import LayerCapture


@dataclass(frozen=True)
class BenchRow:
    method: str
    d_in: int
    N: int
    K: int
    wall_ms: float
    max_rel_residual: float


def synthetic_bundle(d_in: int, N: int, K: int, lam: float = 0.5, seed: int = 0) -> HessianBundle:
    """Random layer with N calibration samples and K rows."""
    rng = np.random.default_rng(seed)
    cap = LayerCapture(rng.standard_normal((d_in, N)), rng.standard_normal((K, d_in, N)))
    W_hat = rng.standard_normal((K, d_in))
    return build_bundle(cap, W_hat, ObjectiveSpec(lam=lam))


def max_rel_residual(bundle: HessianBundle, blocks, rows=None) -> float:
    """max_k ||F_k G_k - I||_F / ||I||_F."""
    d = bundle.d_in
    rows = range(len(blocks)) if rows is None else rows
    worst = 0.0
    eye = np.eye(d)
    for k, G in zip(rows, blocks):
        R = combined_block(bundle, k) @ G
        R -= eye
        worst = max(worst, float(np.linalg.norm(R) / np.sqrt(d)))
    return worst


def time_method(bundle: HessianBundle, method: Method, residual: bool = True) -> tuple[float, float]:
    """(wall seconds, max relative residual) of one full inversion."""
    gc.collect()
    t0 = time.perf_counter()
    inv = invert_all(bundle, method)
    wall = time.perf_counter() - t0
    res = max_rel_residual(bundle, inv.blocks) if residual else float("nan")
    del inv
    return wall, res


def compare_methods(bundle: HessianBundle, methods=(Method.DIRECT, Method.WOODBURY),
                    repeats: int = 1) -> dict[Method, tuple[float, float]]:
    """Best-of-``repeats`` wall time and the residual per method.

    Runs are interleaved so both methods see the same machine conditions;
    the residual is computed on the first run only.
    """
    out: dict[Method, tuple[float, float]] = {}
    for r in range(repeats):
        for m in methods:
            m = Method(m)
            wall, res = time_method(bundle, m, residual=r == 0)
            if r == 0:
                out[m] = (wall, res)
            else:
                out[m] = (min(out[m][0], wall), out[m][1])
    return out


def bench_hinv(sizes, lam: float = 0.5, seed: int = 0,
               methods=(Method.DIRECT, Method.WOODBURY), repeats: int = 1) -> list[BenchRow]:
    rows = []
    for d_in, N, K in sizes:
        bundle = synthetic_bundle(d_in, N, K, lam, seed)
        for m, (wall, res) in compare_methods(bundle, methods, repeats).items():
            rows.append(BenchRow(m.value, d_in, N, K, wall * 1e3, res))
        del bundle
    return rows


def bench_csv(rows: list[BenchRow], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "d_in", "N", "K", "wall_ms", "max_rel_residual"])
    for r in rows:
        w.writerow([r.method, r.d_in, r.N, r.K, f"{r.wall_ms:.3f}", f"{r.max_rel_residual:.3e}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
