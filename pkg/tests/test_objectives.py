from __future__ import annotations

import numpy as np
import pytest

from moprune.objectives import (
    DampPolicy,
    ObjectiveSpec,
    blockify_gram,
    build_bundle,
    combined_block,
    damped_objective,
    eval_losses,
    fisher_normalizer,
    recon_normalizer,
    validate_partition,
)
from moprune.toynet import LayerCapture

from conftest import random_capture


def dense_fisher_matrix(A: np.ndarray) -> np.ndarray:
    """Block-diagonal (K d) x (K d) Fisher built from per-sample outer products."""
    K, d, N = A.shape
    H = np.zeros((K * d, K * d))
    for j in range(N):
        for k in range(K):
            a = A[k, :, j]
            H[k * d:(k + 1) * d, k * d:(k + 1) * d] += np.outer(a, a)
    return H / N


def test_recon_normalizer_examples():
    assert recon_normalizer(np.zeros((2, 2)), np.eye(2)) == 0.0
    assert recon_normalizer(np.eye(2), np.eye(2)) == 2.0
    assert recon_normalizer(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 2.0]])) == 5.0


def test_fisher_normalizer_examples(rng):
    cap = LayerCapture(np.ones((3, 2)), np.zeros((2, 3, 2)))
    assert fisher_normalizer(rng.standard_normal((2, 3)), cap) == 0.0

    w = np.array([1.0, -2.0, 0.5])
    cap = LayerCapture(np.ones((3, 1)), w.reshape(1, 3, 1))
    assert fisher_normalizer(w[None, :], cap) == pytest.approx(np.dot(w, w) ** 2, rel=1e-15)

    cap, W = random_capture(rng, 4, 3, 5)
    H = dense_fisher_matrix(cap.A)
    expect = W.ravel() @ H @ W.ravel()
    assert fisher_normalizer(W, cap) == pytest.approx(expect, rel=1e-10)


def test_lambda_range():
    with pytest.raises(ValueError):
        ObjectiveSpec(lam=1.5)
    with pytest.raises(ValueError):
        ObjectiveSpec(lam=-0.1)


def test_lambda_one_drops_fisher(rng):
    cap, W = random_capture(rng, 3, 4, 6)
    b = build_bundle(cap, W, ObjectiveSpec(lam=1.0))
    assert b.fisher_coef == 0.0
    blocks = [combined_block(b, k) for k in range(3)]
    expect = b.gramX / b.rho_R + b.mu[0] * np.eye(4)
    for F in blocks:
        assert np.array_equal(F, blocks[0])
        assert np.allclose(F, expect, rtol=1e-14, atol=0)


def test_fisher_degenerate(rng):
    X = rng.standard_normal((3, 5))
    cap = LayerCapture(X, np.zeros((2, 3, 5)))
    W = rng.standard_normal((2, 3))
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.3))
    assert b.fisher_degenerate and b.lam_eff == 1.0 and b.fisher_coef == 0.0
    ref = build_bundle(cap, W, ObjectiveSpec(lam=1.0))
    assert np.array_equal(combined_block(b, 0), combined_block(ref, 0))


def test_recon_degenerate(rng):
    cap = LayerCapture(np.zeros((3, 4)), rng.standard_normal((2, 3, 4)))
    b = build_bundle(cap, rng.standard_normal((2, 3)), ObjectiveSpec(lam=0.5))
    assert "recon-degenerate" in b.flags and b.lam_eff == 0.0 and b.recon_coef == 0.0


def test_sparsegpt_damping_example():
    X = np.sqrt(10.0) * np.eye(2)  # diag mean of XX^T is 10
    W = np.array([[1.0 / np.sqrt(10.0), 0.0]])  # rho_R = 1
    cap = LayerCapture(X, np.ones((1, 2, 2)))
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5, damp=DampPolicy.SPARSEGPT, percdamp=0.01))
    assert b.rho_R == pytest.approx(1.0, rel=1e-15)
    assert np.allclose(b.mu, 0.1, rtol=1e-14)


def test_per_block_damping(rng):
    cap, W = random_capture(rng, 3, 4, 6)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.4, damp=DampPolicy.PER_BLOCK, percdamp=0.05))
    undamped = build_bundle(cap, W, ObjectiveSpec(lam=0.4, damp=DampPolicy.NONE))
    for k in range(3):
        F0 = combined_block(undamped, k)
        assert b.mu[k] == pytest.approx(0.05 * np.mean(np.diag(F0)), rel=1e-12)
    assert not b.shared_base


def test_combined_block_lambda_zero_zero_factor(rng):
    A = rng.standard_normal((2, 3, 4))
    A[0] = 0.0
    cap = LayerCapture(rng.standard_normal((3, 4)), A)
    b = build_bundle(cap, rng.standard_normal((2, 3)), ObjectiveSpec(lam=0.0))
    assert b.mu[0] > 0 and b.recon_coef == 0.0
    assert np.array_equal(combined_block(b, 0), b.mu[0] * np.eye(3))


def test_combined_block_dense_construction(rng):
    cap, W = random_capture(rng, 3, 5, 7)
    lam = 0.5
    b = build_bundle(cap, W, ObjectiveSpec(lam=lam))
    rho_R = np.sum((W @ cap.X) ** 2)
    rho_F = W.ravel() @ dense_fisher_matrix(cap.A) @ W.ravel()
    for k in range(3):
        Ak = cap.A[k]
        expect = (lam / rho_R) * cap.X @ cap.X.T + (1 - lam) / (7 * rho_F) * Ak @ Ak.T + b.mu[k] * np.eye(5)
        assert np.abs(combined_block(b, k) - expect).max() <= 1e-12 * np.abs(expect).max()
    with pytest.raises(IndexError):
        combined_block(b, 3)


def test_combined_block_psd_and_affine(rng):
    cap, W = random_capture(rng, 2, 6, 3)
    spec = lambda lam: ObjectiveSpec(lam=lam, damp=DampPolicy.NONE)
    F0 = combined_block(build_bundle(cap, W, spec(0.0)), 1)
    F1 = combined_block(build_bundle(cap, W, spec(1.0)), 1)
    for lam in (0.0, 0.3, 0.7, 1.0):
        F = combined_block(build_bundle(cap, W, spec(lam)), 1)
        assert np.linalg.eigvalsh(F).min() > -1e-12 * np.abs(F).max()
        assert np.allclose(F, lam * F1 + (1 - lam) * F0, rtol=1e-12, atol=1e-14)
    # lambda = 0: the Fisher term has rank at most N
    assert np.linalg.matrix_rank(F0, tol=1e-10 * np.abs(F0).max()) <= 3


def test_eval_losses_examples(rng):
    cap, W_hat = random_capture(rng, 3, 4, 6)
    b = build_bundle(cap, W_hat, ObjectiveSpec(lam=0.3))
    assert eval_losses(W_hat, W_hat, b) == (0.0, 0.0, 0.0)
    assert eval_losses(np.zeros_like(W_hat), W_hat, b).L_lambda == pytest.approx(1.0, abs=1e-14)

    W = W_hat + 0.1 * rng.standard_normal(W_hat.shape)
    L = eval_losses(W, W_hat, b)
    assert L.L_R == pytest.approx(np.sum(((W - W_hat) @ cap.X) ** 2), rel=1e-9)
    D = (W - W_hat).ravel()
    assert L.L_F == pytest.approx(D @ dense_fisher_matrix(cap.A) @ D, rel=1e-9)
    assert L.L_lambda == pytest.approx(0.3 * L.L_R / b.rho_R + 0.7 * L.L_F / b.rho_F, rel=1e-12)

    expect = sum((W - W_hat)[k] @ combined_block(b, k) @ (W - W_hat)[k] for k in range(3))
    assert damped_objective(W, W_hat, b) == pytest.approx(expect, rel=1e-10)


def test_blockify_examples(rng):
    M = rng.standard_normal((4, 4))
    G = M @ M.T
    assert np.array_equal(blockify_gram(G, [[0, 1, 2, 3]]), G)
    assert np.array_equal(blockify_gram(G, [[0], [1], [2], [3]]), np.diag(np.diag(G)))
    B = blockify_gram(G, [[0, 1], [2, 3]])
    for i, j in [(0, 2), (0, 3), (1, 2), (1, 3)]:
        assert B[i, j] == 0.0 and B[j, i] == 0.0
    assert np.array_equal(B[:2, :2], G[:2, :2]) and np.array_equal(B[2:, 2:], G[2:, 2:])


def test_partition_errors():
    with pytest.raises(ValueError, match="overlapping"):
        validate_partition([[0, 1], [1, 2]], 3)
    with pytest.raises(ValueError, match="cover"):
        validate_partition([[0, 1]], 3)
    with pytest.raises(ValueError, match="range"):
        validate_partition([[0, 3]], 3)


def test_partitioned_bundle_normalization(rng):
    cap, W = random_capture(rng, 2, 4, 5)
    b = build_bundle(cap, W, ObjectiveSpec(lam=0.5, partition=((0, 1), (2, 3))))
    assert eval_losses(np.zeros_like(W), W, b).L_lambda == pytest.approx(1.0, abs=1e-14)
    F = combined_block(b, 0)
    assert F[0, 2] == 0.0 and F[3, 1] == 0.0
