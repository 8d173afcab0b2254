"""Blended per-row quadratic objectives.

For a layer with dense weights ``W_hat`` (d_out x d_in), inputs X and Fisher
factors A_k, each row k gets the matrix

    F_k = (lam / rho_R) * XX^T + ((1 - lam) / (N * rho_F)) * A_k A_k^T + mu * I

where rho_R and rho_F are the two losses evaluated at W = 0, so that both
normalized terms equal 1 at the zero matrix.  Dense Fisher blocks are never
formed here; the Fisher loss is always evaluated as ||A_k^T d_k||^2 / N.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .matrixcore import as_mat, gram

DEGENERATE_TOL = 1e-12


class DampPolicy(str, enum.Enum):
    SPARSEGPT = "sparsegpt"  # shared: fraction of the mean diagonal of XX^T
    PER_BLOCK = "per-block"  # fraction of the mean diagonal of each F_k
    NONE = "none"


def validate_partition(partition: Sequence[Sequence[int]], d_in: int) -> list[np.ndarray]:
    """Check that ``partition`` tiles range(d_in) exactly once."""
    blocks = [np.asarray(sorted(b), dtype=np.int64) for b in partition]
    seen = np.zeros(d_in, dtype=np.int64)
    for b in blocks:
        if b.size == 0:
            raise ValueError("empty block in partition")
        if b.min() < 0 or b.max() >= d_in:
            raise ValueError(f"partition index out of range [0, {d_in})")
        np.add.at(seen, b, 1)
    if (seen > 1).any():
        raise ValueError(f"overlapping partition at indices {np.flatnonzero(seen > 1).tolist()}")
    if (seen == 0).any():
        raise ValueError(f"partition does not cover indices {np.flatnonzero(seen == 0).tolist()}")
    return blocks


@dataclass(frozen=True)
class ObjectiveSpec:
    lam: float = 0.5
    damp: DampPolicy = DampPolicy.SPARSEGPT
    percdamp: float = 0.01
    # None: one block per row (exact XX^T per row). Otherwise a partition of
    # the input columns applied inside every row; both terms are blockified.
    partition: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda={self.lam} outside [0, 1]")
        if self.percdamp < 0:
            raise ValueError("percdamp must be >= 0")
        object.__setattr__(self, "damp", DampPolicy(self.damp))


def blockify_gram(gramX: np.ndarray, partition) -> np.ndarray:
    """Zero every entry of ``gramX`` that couples two different partition blocks."""
    gramX = as_mat(gramX)
    blocks = validate_partition(partition, gramX.shape[0])
    out = np.zeros_like(gramX)
    for b in blocks:
        out[np.ix_(b, b)] = gramX[np.ix_(b, b)]
    return out


def recon_normalizer(W_hat, X) -> float:
    """||W_hat X||_F^2, the reconstruction loss at W = 0."""
    Y = as_mat(W_hat) @ as_mat(X)
    return float(np.sum(Y * Y))


def _fisher_quad(A: np.ndarray, D: np.ndarray, blocks: list[np.ndarray] | None) -> float:
    """sum_k ||A_k^T d_k||^2 (per partition block when ``blocks`` is given)."""
    if blocks is None:
        proj = np.einsum("kin,ki->kn", A, D)
        return float(np.sum(proj * proj))
    total = 0.0
    for b in blocks:
        proj = np.einsum("kin,ki->kn", A[:, b, :], D[:, b])
        total += float(np.sum(proj * proj))
    return total


def fisher_normalizer(W_hat, capture, partition=None) -> float:
    """(1/N) sum_k ||A_k^T w_hat_k||^2, the Fisher loss at W = 0."""
    W_hat = as_mat(W_hat)
    blocks = None if partition is None else validate_partition(partition, W_hat.shape[1])
    return _fisher_quad(capture.A, W_hat, blocks) / capture.n_samples


@dataclass
class HessianBundle:
    """Everything needed to materialize any F_k of one layer."""

    gramX: np.ndarray
    A: np.ndarray  # (d_out, d_in, N) Fisher factors
    rho_R: float
    rho_F: float
    lam: float  # as requested
    lam_eff: float  # after the degenerate-normalizer rule
    damp: DampPolicy
    mu: np.ndarray  # (d_out,) per-row damping; constant unless PER_BLOCK
    n_samples: int
    partition: list[np.ndarray] | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return self.gramX.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    @property
    def recon_coef(self) -> float:
        if self.lam_eff == 0.0:
            return 0.0
        return self.lam_eff / self.rho_R

    @property
    def fisher_coef(self) -> float:
        if self.lam_eff == 1.0:
            return 0.0
        return (1.0 - self.lam_eff) / (self.n_samples * self.rho_F)

    @property
    def shared_base(self) -> bool:
        """True when all rows share one damping value (so one base inverse serves all)."""
        return bool(np.all(self.mu == self.mu[0]))

    @property
    def fisher_degenerate(self) -> bool:
        return "fisher-degenerate" in self.flags

    def factor(self, k: int) -> np.ndarray:
        """Low-rank factor U_k with U_k U_k^T equal to row k's (blockified) A_k A_k^T."""
        A = self.A[k]
        if self.partition is None or len(self.partition) == 1:
            return A
        parts = []
        for b in self.partition:
            P = np.zeros_like(A)
            P[b] = A[b]
            parts.append(P)
        return np.hstack(parts)

    def fisher_block(self, k: int) -> np.ndarray:
        """(Blockified) A_k A_k^T, unscaled."""
        A = self.A[k]
        H = A @ A.T
        if self.partition is not None:
            H = blockify_gram(H, self.partition)
        return H

    def base(self, k: int = 0) -> np.ndarray:
        """The reconstruction part plus damping: (lam/rho_R) XX^T + mu_k I."""
        B = self.recon_coef * self.gramX
        B[np.diag_indices_from(B)] += self.mu[k]
        return B

    def to_tensors(self) -> dict[str, np.ndarray]:
        t = {
            "gramX": self.gramX,
            "scalars": np.array([self.rho_R, self.rho_F, self.lam, self.lam_eff, float(self.n_samples)]),
            "mu": self.mu,
        }
        for k in range(self.d_out):
            t[f"fisher.{k}"] = self.A[k]
        return t


def _undamped_diag_means(gramX, A, recon_coef, fisher_coef) -> np.ndarray:
    # mean diag of recon_coef*XX^T + fisher_coef*A_k A_k^T, for every k
    # (blockification keeps diagonals, so no partition needed)
    fisher_diag = np.einsum("kin,kin->ki", A, A)
    return recon_coef * np.mean(np.diag(gramX)) + fisher_coef * fisher_diag.mean(axis=1)


def build_bundle(capture, W_hat, spec: ObjectiveSpec) -> HessianBundle:
    """Assemble the Hessian bundle of one layer from its calibration capture.

    ``capture`` needs ``X`` (d_in x N), ``A`` (d_out, d_in, N) and ``n_samples``.
    """
    W_hat = as_mat(W_hat)
    X = as_mat(capture.X)
    A = np.asarray(capture.A, dtype=np.float64)
    N = X.shape[1]
    d_out, d_in = W_hat.shape
    if X.shape[0] != d_in or A.shape != (d_out, d_in, N):
        raise ValueError(f"capture shapes X{X.shape} A{A.shape} do not match W_hat {W_hat.shape}")

    gramX = gram(X)
    blocks = None
    if spec.partition is not None:
        blocks = validate_partition(spec.partition, d_in)
        gramX = blockify_gram(gramX, spec.partition)
        rho_R = float(np.einsum("ki,ij,kj->", W_hat, gramX, W_hat))
    else:
        rho_R = recon_normalizer(W_hat, X)
    rho_F = _fisher_quad(A, W_hat, blocks) / N

    lam_eff = spec.lam
    flags: list[str] = []
    if rho_F < DEGENERATE_TOL and lam_eff < 1.0:
        flags.append("fisher-degenerate")
        lam_eff = 1.0
    if rho_R < DEGENERATE_TOL and lam_eff > 0.0:
        flags.append("recon-degenerate")
        lam_eff = 0.0
    if "fisher-degenerate" in flags and "recon-degenerate" in flags:
        raise ValueError("both normalizers vanish; the layer output and gradients are all zero")

    recon_coef = 0.0 if lam_eff == 0.0 else lam_eff / rho_R
    fisher_coef = 0.0 if lam_eff == 1.0 else (1.0 - lam_eff) / (N * rho_F)

    if spec.damp is DampPolicy.NONE:
        mu = np.zeros(d_out)
    elif spec.damp is DampPolicy.SPARSEGPT:
        # measured on XX^T in the normalized (1/rho_R) units of the blended objective
        if rho_R >= DEGENERATE_TOL:
            base_mean = np.mean(np.diag(gramX)) / rho_R
        else:
            base_mean = float(np.mean(_undamped_diag_means(gramX, A, 0.0, fisher_coef)))
        mu = np.full(d_out, spec.percdamp * base_mean)
    else:
        means = _undamped_diag_means(gramX, A, recon_coef, fisher_coef)
        means = np.where(means > 0, means, 1.0)
        mu = spec.percdamp * means

    return HessianBundle(gramX=gramX, A=A, rho_R=rho_R, rho_F=rho_F, lam=spec.lam, lam_eff=lam_eff,
                         damp=spec.damp, mu=mu, n_samples=N, partition=blocks, flags=flags)


def combined_block(bundle: HessianBundle, k: int) -> np.ndarray:
    """F_k for row k, damping included."""
    if not 0 <= k < bundle.d_out:
        raise IndexError(f"row {k} out of range [0, {bundle.d_out})")
    F = bundle.base(k)
    if bundle.fisher_coef != 0.0:
        F += bundle.fisher_coef * bundle.fisher_block(k)
    return 0.5 * (F + F.T)


class Losses(NamedTuple):
    L_R: float
    L_F: float
    L_lambda: float


def eval_losses(W, W_hat, bundle: HessianBundle) -> Losses:
    """Reconstruction, Fisher and blended losses of ``W`` (damping excluded)."""
    D = as_mat(W) - as_mat(W_hat)
    L_R = float(np.einsum("ki,ij,kj->", D, bundle.gramX, D))
    L_F = _fisher_quad(bundle.A, D, bundle.partition) / bundle.n_samples
    L_lam = 0.0
    if bundle.lam_eff > 0.0:
        L_lam += bundle.lam_eff * L_R / bundle.rho_R
    if bundle.lam_eff < 1.0:
        L_lam += (1.0 - bundle.lam_eff) * L_F / bundle.rho_F
    return Losses(L_R, L_F, L_lam)


def damped_objective(W, W_hat, bundle: HessianBundle) -> float:
    """sum_k (w_k - w_hat_k)^T F_k (w_k - w_hat_k), i.e. the quantity the pruners minimize."""
    D = as_mat(W) - as_mat(W_hat)
    return eval_losses(W, W_hat, bundle).L_lambda + float(np.sum(bundle.mu * np.sum(D * D, axis=1)))
