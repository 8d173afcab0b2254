from __future__ import annotations

import tracemalloc

import numpy as np
import pytest

from moprune.hinv import (
    BaseNotInvertible,
    Method,
    base_inverse,
    choose_method,
    invert_all,
    low_rank_base,
    woodbury_block_inverse,
)
from moprune.matrixcore import spd_inverse
from moprune.objectives import DampPolicy, ObjectiveSpec, build_bundle, combined_block
from moprune.toynet import LayerCapture

from conftest import random_capture

# Python object headers and LAPACK wrapper bookkeeping per call; independent of d and N
CALL_OVERHEAD_BYTES = 8192


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_base_inverse_examples(rng):
    A = rng.standard_normal((2, 3, 4))
    cap = LayerCapture(rng.standard_normal((3, 4)), A)
    b = build_bundle(cap, rng.standard_normal((2, 3)), ObjectiveSpec(lam=0.0))
    b.mu[:] = 1.0
    assert np.allclose(base_inverse(b), np.eye(3), rtol=0, atol=1e-15)

    cap = LayerCapture(np.eye(2), rng.standard_normal((1, 2, 2)))
    b = build_bundle(cap, np.array([[1.0, 0.0]]), ObjectiveSpec(lam=1.0, damp=DampPolicy.NONE))
    assert b.rho_R == 1.0
    assert np.array_equal(base_inverse(b), np.eye(2))

    cap, W = random_capture(rng, 3, 16, 32)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5))
    res = b.base() @ base_inverse(b) - np.eye(16)
    assert np.linalg.norm(res) < 1e-8


def test_base_not_invertible(rng):
    cap, W = random_capture(rng, 2, 6, 3)  # rank-3 XX^T, no damping
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5, damp=DampPolicy.NONE))
    with pytest.raises(BaseNotInvertible, match="increase damping"):
        base_inverse(b)


def test_woodbury_trivial_cases(rng):
    M = rng.standard_normal((5, 5))
    J0 = spd_inverse(M @ M.T + np.eye(5))
    A = rng.standard_normal((5, 2))
    assert woodbury_block_inverse(J0, A, 0.0) is J0
    assert np.array_equal(woodbury_block_inverse(J0, np.zeros((5, 2)), 0.7), J0)
    with pytest.raises(ValueError):
        woodbury_block_inverse(J0, A, -1.0)


def test_woodbury_matches_direct(rng):
    cap, W = random_capture(rng, 4, 32, 8)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5))
    J0 = base_inverse(b)
    for k in range(4):
        G = woodbury_block_inverse(J0, b.factor(k), b.fisher_coef)
        ref = spd_inverse(combined_block(b, k))
        assert rel(G, ref) < 1e-8
        assert np.abs(G - G.T).max() < 1e-12


def test_invert_all_lambda_one_shares_one_inverse(rng):
    cap, W = random_capture(rng, 5, 6, 10)
    b = build_bundle(cap, W, ObjectiveSpec(lam=1.0))
    inv = invert_all(b, Method.WOODBURY)
    assert inv.n_inversions == 1 and len(inv.blocks) == 5
    assert all(G is inv.blocks[0] for G in inv.blocks)
    ref = spd_inverse(combined_block(b, 0))
    assert rel(inv.blocks[0], ref) < 1e-12


def test_single_row_cross_method(rng):
    cap, W = random_capture(rng, 1, 12, 3)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.4))
    a = invert_all(b, Method.WOODBURY).blocks[0]
    d = invert_all(b, Method.DIRECT).blocks[0]
    assert rel(a, d) < 1e-8


def test_equivalence_and_residual_sweep():
    rng = np.random.default_rng(7)
    count = 0
    for d in (8, 16, 32):
        for N in (1, 4, 8):
            for lam in (0.0, 0.25, 0.5, 0.9, 1.0):
                for mu in (1e-3, 1e-1):
                    cap, W = random_capture(rng, 2, d, N)
                    b = build_bundle(cap, W, ObjectiveSpec(lam=lam, damp=DampPolicy.NONE))
                    b.mu[:] = mu
                    w = invert_all(b, Method.WOODBURY)
                    r = invert_all(b, Method.DIRECT)
                    for k in range(2):
                        assert rel(w.blocks[k], r.blocks[k]) < 1e-8
                        assert np.abs(w.blocks[k] - w.blocks[k].T).max() < 1e-12
                        F = combined_block(b, k)
                        assert np.linalg.norm(F @ w.blocks[k] - np.eye(d)) / np.sqrt(d) < 1e-7
                    count += 1
    assert count == 90


def test_chol_factors(rng):
    cap, W = random_capture(rng, 3, 10, 4)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.6))
    inv = invert_all(b, with_chol=True)
    for G, U in zip(inv.blocks, inv.chol):
        assert np.array_equal(U, np.triu(U))
        assert np.allclose(U.T @ U, G, rtol=1e-12, atol=1e-14 * np.abs(G).max())
    shared = invert_all(build_bundle(cap, W, ObjectiveSpec(lam=1.0)), with_chol=True)
    assert all(U is shared.chol[0] for U in shared.chol)


def test_choose_method(rng):
    cap, W = random_capture(rng, 8, 32, 4)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5))
    assert choose_method(b, "auto", 8) is Method.WOODBURY
    assert choose_method(b, "auto", 2) is Method.DIRECT
    assert choose_method(b, "direct", 8) is Method.DIRECT
    per_row = build_bundle(cap, W, ObjectiveSpec(lam=0.5, damp=DampPolicy.PER_BLOCK))
    assert choose_method(per_row, "auto", 8) is Method.DIRECT
    with pytest.raises(ValueError):
        invert_all(per_row, Method.WOODBURY)


def _woodbury_peak(J0, A, c, low_rank=None) -> int:
    woodbury_block_inverse(J0, A, c, low_rank=low_rank)  # warm caches
    tracemalloc.start()
    try:
        before = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        G = woodbury_block_inverse(J0, A, c, low_rank=low_rank)
        peak = tracemalloc.get_traced_memory()[1] - before
    finally:
        tracemalloc.stop()
    del G
    return peak


@pytest.mark.parametrize("d,N", [(16, 2), (64, 8), (256, 32), (512, 128)])
def test_woodbury_peak_temporaries(d, N):
    rng = np.random.default_rng(d)
    M = rng.standard_normal((d, d))
    J0 = spd_inverse(M @ M.T / d + np.eye(d))
    A = rng.standard_normal((d, N))
    budget = (d * N + N * N + d * d) * 8
    peak = _woodbury_peak(J0, A, 0.3)
    assert peak <= budget + CALL_OVERHEAD_BYTES, (peak, budget)
    assert peak >= d * d * 8  # the result itself is counted


def test_block_error_names_row(rng):
    cap, W = random_capture(rng, 3, 4, 2)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5, damp=DampPolicy.PER_BLOCK))
    b.mu[1] = -10.0
    with pytest.raises(Exception, match="block 1"):
        invert_all(b, Method.DIRECT)


def test_low_rank_base_selection(rng):
    cap, W = random_capture(rng, 3, 64, 8)  # XX^T has rank 8 <= 64 / 4
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5))
    lr = low_rank_base(b)
    assert lr is not None and lr.Q.shape == (64, 8)
    J0 = (np.eye(64) - lr.Q @ np.diag(lr.w) @ lr.Q.T) / lr.mu
    assert rel(J0, base_inverse(b)) < 1e-12
    A = b.factor(1)
    assert rel(lr.apply_t(A), (base_inverse(b) @ A).T) < 1e-12
    G = woodbury_block_inverse(base_inverse(b), A, b.fisher_coef, low_rank=lr)
    assert rel(G, spd_inverse(combined_block(b, 1))) < 1e-8

    full, W = random_capture(rng, 3, 16, 40)  # full-rank base
    assert low_rank_base(build_bundle(full, W, ObjectiveSpec(lam=0.5))) is None
    cap, W = random_capture(rng, 3, 64, 8)  # lambda = 0: the base is mu I only
    assert low_rank_base(build_bundle(cap, W, ObjectiveSpec(lam=0.0))) is None


@pytest.mark.parametrize("d,N", [(64, 8), (256, 32), (512, 128)])
def test_woodbury_peak_temporaries_low_rank(d, N):
    rng = np.random.default_rng(d + 1)
    cap, W = random_capture(rng, 1, d, N)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5))
    lr = low_rank_base(b)
    assert lr is not None
    budget = (d * N + N * N + d * d) * 8
    peak = _woodbury_peak(base_inverse(b), b.factor(0), b.fisher_coef, lr)
    assert peak <= budget + CALL_OVERHEAD_BYTES, (peak, budget)
