"""Slow, simple reference computations used to check the fast paths.

Nothing here reuses the pruners, Hessian builders or the network's backward
pass; enumeration and solves are done directly with numpy.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_CANDIDATES = 10**6


class OracleTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class OracleResult:
    value: float
    support: tuple[int, ...]
    candidates: int
    weights: np.ndarray | None = None


def _check_count(n: int, k: int) -> int:
    count = math.comb(n, k)
    if count > MAX_CANDIDATES:
        raise OracleTooLarge(f"C({n}, {k}) = {count} candidates exceeds the cap of {MAX_CANDIDATES}")
    return count


def _restricted_opt(w_hat: np.ndarray, F: np.ndarray, S: tuple[int, ...]):
    """Minimize (w - w_hat)^T F (w - w_hat) over w supported on S."""
    w = np.zeros_like(w_hat)
    if S:
        idx = list(S)
        w[idx] = np.linalg.solve(F[np.ix_(idx, idx)], F[idx, :] @ w_hat)
    d = w - w_hat
    return float(d @ F @ d), w


def brute_force_row(w_hat, F, keep: int) -> OracleResult:
    """Best support of size ``keep`` by exhaustive enumeration.

    Ties keep the lexicographically first support.
    """
    w_hat = np.asarray(w_hat, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    d = w_hat.shape[0]
    if not 0 <= keep <= d:
        raise ValueError(f"keep={keep} outside [0, {d}]")
    _check_count(d, keep)
    best = (math.inf, (), None)
    n = 0
    for S in itertools.combinations(range(d), keep):
        n += 1
        val, w = _restricted_opt(w_hat, F, S)
        if val < best[0]:
            best = (val, S, w)
    return OracleResult(best[0], best[1], n, best[2])


def brute_force_columns(W_hat, Fs: Sequence[np.ndarray], n_prune: int) -> OracleResult:
    """Best set of kept columns (same for every row) by exhaustive enumeration."""
    W_hat = np.asarray(W_hat, dtype=np.float64)
    K, d = W_hat.shape
    keep = d - n_prune
    _check_count(d, keep)
    best = (math.inf, (), None)
    n = 0
    for S in itertools.combinations(range(d), keep):
        n += 1
        total = 0.0
        W = np.zeros_like(W_hat)
        for k in range(K):
            val, W[k] = _restricted_opt(W_hat[k], np.asarray(Fs[k], dtype=np.float64), S)
            total += val
        if total < best[0]:
            best = (total, S, W)
    return OracleResult(best[0], best[1], n, best[2])


def best_single_removal(w, F) -> tuple[int, float]:
    """Exhaustive minimum over single-weight removals with the optimal refit of the rest.

    Works on the current support of ``w`` (all entries); returns (index, increase).
    """
    w = np.asarray(w, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    d = w.shape[0]
    best = (-1, math.inf)
    for p in range(d):
        S = tuple(i for i in range(d) if i != p)
        val, _ = _restricted_opt(w, F, S)
        if val < best[1]:
            best = (p, val)
    return best


def _mlp_loss(weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray, y: int) -> float:
    a = x
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = W @ a + b
        a = z if i == len(weights) - 1 else np.maximum(z, 0.0)
    m = a.max()
    return float(m + math.log(np.exp(a - m).sum()) - a[y])


def finite_diff_grad(net, sample, layer: int, step: float = 1e-4) -> np.ndarray:
    """Central differences of one sample's loss w.r.t. every weight of ``layer``.

    ``sample`` is ``(x, y)`` with x a 1-D input vector.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    x, y = sample
    x = np.asarray(x, dtype=np.float64).ravel()
    weights = [l.W.copy() for l in net.layers]
    biases = [l.b.copy() for l in net.layers]
    W = weights[layer]
    grad = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        orig = W[idx]
        W[idx] = orig + step
        up = _mlp_loss(weights, biases, x, int(y))
        W[idx] = orig - step
        down = _mlp_loss(weights, biases, x, int(y))
        W[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def dense_fisher(cap, layer: int) -> list[np.ndarray]:
    """H_k = (1/N) sum_j a_kj a_kj^T for every row k, as explicit outer-product sums."""
    A = np.asarray(cap[layer].A, dtype=np.float64)
    K, d, N = A.shape
    out = []
    for k in range(K):
        H = np.zeros((d, d))
        for j in range(N):
            H += np.outer(A[k, :, j], A[k, :, j])
        out.append(H / N)
    return out


def sparsegpt_reference(W_hat, X, ratio: float | None = None, nm: tuple[int, int] | None = None,
                        Bs: int = 16, percdamp: float = 0.01, scale: float | None = None) -> np.ndarray:
    """Single-objective column sweep with one shared H = XX^T / scale, no lazy batching.

    Every pruned weight's error is applied to all later columns right away.
    ``scale`` defaults to ||W_hat X||_F^2.  Unstructured masks are chosen over
    all rows for each window of ``Bs`` columns with round-half-up cumulative
    counts; ``nm=(n, m)`` zeroes n per group of m in each row.
    """
    W = np.array(W_hat, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    K, d = W.shape
    if scale is None:
        scale = float(np.sum((W @ X) ** 2))
    H = (X @ X.T) / scale
    H = 0.5 * (H + H.T)
    H += percdamp * np.mean(np.diag(H)) * np.eye(d)
    L = np.linalg.cholesky(H)
    Linv = np.linalg.solve(L, np.eye(d))
    Hinv = Linv.T @ Linv
    U = np.linalg.cholesky(0.5 * (Hinv + Hinv.T)).T
    keep = np.ones((K, d), dtype=bool)
    for j in range(d):
        if nm is None and j % Bs == 0:
            b = min(j + Bs, d)
            nz = int(math.floor(ratio * K * b + 0.5)) - int(math.floor(ratio * K * j + 0.5))
            sc = (W[:, j:b] ** 2 / np.diag(U)[j:b] ** 2).ravel()
            order = sorted(range(sc.size), key=lambda i: (sc[i], i))
            win = np.ones(sc.size, dtype=bool)
            win[order[:nz]] = False
            keep[:, j:b] = win.reshape(K, b - j)
        elif nm is not None and j % nm[1] == 0:
            b = j + nm[1]
            sc = W[:, j:b] ** 2 / np.diag(U)[j:b] ** 2
            for k in range(K):
                order = sorted(range(nm[1]), key=lambda i: (sc[k, i], i))
                keep[k, j:b] = True
                keep[k, [j + i for i in order[:nm[0]]]] = False
        err = np.where(keep[:, j], 0.0, W[:, j] / U[j, j])
        W[:, j:] -= np.outer(err, U[j, j:])
    return W * keep
