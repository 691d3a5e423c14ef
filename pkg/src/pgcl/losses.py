"""Contrastive and clustering-consistency objectives.

All contrastive variants share one form. For query i with positive score
s_ii = z_i . z'_i and cross-view scores s_ij = z_i . z'_j,

    loss_i = log(1 + sum_j a_ij exp((s_ij - s_ii) / tau))

which equals -log(e^{s_ii/tau} / (e^{s_ii/tau} + sum_j a_ij e^{s_ij/tau})).
The variants differ only in the constant coefficient matrix a:

    infonce      a_ij = 1[i != j]
    masked       a_ij = 1[c_i != c_j]
    reweighted   a_ij = M_i 1[c_i != c_j] w_ij,   M_i = N / sum_j w_ij

A fully masked row therefore contributes exactly log1p(0) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .prototypes import PrototypeBank, negative_weight_matrix
from .tensor import Tensor

LOSS_MODES = (
    "infonce",
    "consistency-only",
    "reweighted-only",
    "infonce+consistency",
    "reweighted+consistency",
)
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    lam: float = 6.0
    mode: str = "reweighted+consistency"
    mi_masked_sum: bool = False
    symmetric: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}; choose from {LOSS_MODES}")

    @property
    def uses_consistency(self) -> bool:
        return "consistency" in self.mode

    @property
    def contrastive_kind(self) -> str | None:
        if self.mode.startswith("infonce"):
            return "infonce"
        if self.mode.startswith("reweighted"):
            return "reweighted"
        return None


@dataclass
class BatchViews:
    """Everything the objectives need for one batch of N graphs."""

    z: Tensor
    z2: Tensor
    p: Tensor
    p2: Tensor
    q: np.ndarray
    q2: np.ndarray
    clusters: np.ndarray


def contrastive_from_coefficients(z: Tensor, z2: Tensor, coef: np.ndarray, tau: float) -> Tensor:
    if z.shape != z2.shape:
        raise T.ShapeError(f"view embeddings differ in shape: {z.shape} vs {z2.shape}")
    n = z.shape[0]
    if coef.shape != (n, n):
        raise T.ShapeError(f"coefficient matrix {coef.shape} for batch of {n}")
    sim = T.matmul(z, T.transpose(z2))
    pos = T.sum_rows(T.mul(z, z2))
    logits = T.scale(T.sub(sim, pos), 1.0 / tau)
    neg_mass = T.sum_rows(T.mul(T.exp(logits), coef))
    return T.mean(T.log1p(neg_mass))


def infonce(z: Tensor, z2: Tensor, tau: float = 0.5) -> Tensor:
    """Cross-view InfoNCE, negatives z'_j for j != i, averaged over queries."""
    n = z.shape[0]
    return contrastive_from_coefficients(z, z2, 1.0 - np.eye(n), tau)


def cluster_mask(clusters) -> np.ndarray:
    c = np.asarray(clusters)
    return (c[:, None] != c[None, :]).astype(np.float64)


def masked_contrastive(z: Tensor, z2: Tensor, clusters, tau: float = 0.5) -> Tensor:
    return contrastive_from_coefficients(z, z2, cluster_mask(clusters), tau)


def reweighting_coefficients(weights: np.ndarray, clusters, masked_sum: bool = False) -> np.ndarray:
    """a_ij = M_i 1[c_i != c_j] w_ij.

    M_i = N / sum_j w_ij over all j by default; with ``masked_sum`` the sum
    runs over unmasked j only.
    """
    mask = cluster_mask(clusters)
    n = mask.shape[0]
    denom = (weights * mask).sum(axis=1) if masked_sum else weights.sum(axis=1)
    m = np.divide(float(n), denom, out=np.zeros(n), where=denom > 0)
    return m[:, None] * mask * weights


def reweighted_contrastive(z: Tensor, z2: Tensor, clusters, bank: PrototypeBank,
                           tau: float = 0.5, masked_sum: bool = False,
                           weights: np.ndarray | None = None) -> Tensor:
    """Cluster-masked InfoNCE with Gaussian prototype-distance weights.

    Weights and M_i are constants computed off the tape from the prototypes.
    """
    if weights is None:
        weights = negative_weight_matrix(bank, clusters)
    coef = reweighting_coefficients(weights, clusters, masked_sum)
    return contrastive_from_coefficients(z, z2, coef, tau)


def consistency(p: Tensor, q2, p2: Tensor, q) -> Tensor:
    """Swapped prediction: view-2 targets supervise view-1 predictions and
    vice versa. Mean over samples of half the summed cross-entropies."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q)
    q2 = np.asarray(q2.data if isinstance(q2, Tensor) else q2)
    if not (p.shape == p2.shape == q.shape == q2.shape):
        raise T.ShapeError("consistency: prediction/target shapes differ")
    n = p.shape[0]
    ce = T.add(T.mul(T.log(p, floor=LOG_FLOOR), q2), T.mul(T.log(p2, floor=LOG_FLOOR), q))
    return T.scale(T.sum_all(ce), -0.5 / n)


def _contrastive_term(views: BatchViews, bank: PrototypeBank, cfg: LossConfig) -> Tensor:
    kind = cfg.contrastive_kind
    if kind == "infonce":
        fwd = infonce(views.z, views.z2, cfg.tau)
        back = infonce(views.z2, views.z, cfg.tau) if cfg.symmetric else None
    else:
        w = negative_weight_matrix(bank, views.clusters)
        fwd = reweighted_contrastive(views.z, views.z2, views.clusters, bank, cfg.tau,
                                     cfg.mi_masked_sum, weights=w)
        back = (reweighted_contrastive(views.z2, views.z, views.clusters, bank, cfg.tau,
                                       cfg.mi_masked_sum, weights=w)
                if cfg.symmetric else None)
    if back is None:
        return fwd
    return T.scale(T.add(fwd, back), 0.5)


def combined(views: BatchViews, bank: PrototypeBank, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Total training loss for ``cfg.mode`` plus its component values.

    Consistency is scaled by lambda when paired with a contrastive term and
    enters unscaled in consistency-only mode.
    """
    parts: dict[str, float] = {}
    total = None
    if cfg.contrastive_kind is not None:
        total = _contrastive_term(views, bank, cfg)
        parts[f"loss_{cfg.contrastive_kind}"] = total.item()
    if cfg.uses_consistency:
        cons = consistency(views.p, views.q2, views.p2, views.q)
        parts["loss_consistency"] = cons.item()
        if total is None:
            total = cons
        elif cfg.lam != 0.0:
            total = T.add(total, T.scale(cons, cfg.lam))
    return total, parts
