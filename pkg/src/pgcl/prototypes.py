"""Prototype bank, balanced Sinkhorn-Knopp targets and negative-pair weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class SinkhornConfig:
    eps: float = 0.05
    niters: int = 3

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"sinkhorn eps must be positive, got {self.eps}")
        if self.niters < 1:
            raise ValueError(f"sinkhorn niters must be >= 1, got {self.niters}")


class PrototypeBank:
    """K trainable prototypes stored as the rows of a K x D matrix."""

    def __init__(self, num_prototypes: int, dim: int, rng: np.random.Generator):
        if num_prototypes < 1:
            raise ValueError("need at least one prototype")
        c = rng.standard_normal((num_prototypes, dim))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        self.C = Tensor(c, requires_grad=True, name="prototypes")
        self._rng = rng

    @property
    def K(self) -> int:
        return self.C.shape[0]

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    def renormalize(self) -> None:
        renormalize(self)


def renormalize(bank: PrototypeBank) -> None:
    """Rescale every prototype to unit L2 norm, in place and off the tape.

    A prototype that collapsed to zero is redrawn from a unit Gaussian. Rows
    already unit within rounding are left untouched, so the call is idempotent.
    """
    c = bank.C.data
    norms = np.linalg.norm(c, axis=1)
    for k in np.flatnonzero(norms == 0):
        fresh = bank._rng.standard_normal(c.shape[1])
        c[k] = fresh
        norms[k] = np.linalg.norm(fresh)
    off = np.abs(norms - 1.0) > 4 * np.finfo(np.float64).eps
    c[off] /= norms[off, None]


def prototype_scores(z: Tensor, bank: PrototypeBank) -> Tensor:
    """S = Z C^T, an N x K score matrix on the tape."""
    if z.shape[1] != bank.dim:
        raise T.ShapeError(f"embeddings have dim {z.shape[1]}, prototypes {bank.dim}")
    return T.matmul(z, T.transpose(bank.C))


def sinkhorn_transport(scores, eps: float = 0.05, niters: int = 3) -> np.ndarray:
    """The K x N transport matrix after ``niters`` row/column rescalings.

    Row marginal target is 1/K, column marginal 1/N. The max of scores/eps is
    subtracted before exponentiation; the global normalization cancels it.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("sinkhorn: scores must be finite")
    logits = s / eps
    q = np.exp(logits - logits.max()).T
    q /= q.sum()
    k, n = q.shape
    r = np.full(k, 1.0 / k)
    c = np.full(n, 1.0 / n)
    for _ in range(niters):
        u = q.sum(axis=1)
        q *= _safe_ratio(r, u)[:, None]
        q *= _safe_ratio(c, q.sum(axis=0))[None, :]
    return q


def _safe_ratio(target: np.ndarray, mass: np.ndarray) -> np.ndarray:
    # a fully underflowed row/column stays zero instead of turning into NaN
    return np.divide(target, mass, out=np.zeros_like(target), where=mass > 0)


def sinkhorn(scores, cfg: SinkhornConfig | None = None) -> np.ndarray:
    """Balanced soft assignments Q (N x K, rows sum to 1). Never on the tape."""
    cfg = cfg or SinkhornConfig()
    q = sinkhorn_transport(scores, cfg.eps, cfg.niters)
    return (q / q.sum(axis=0, keepdims=True)).T


def hard_assign(q: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest prototype index."""
    return np.argmax(np.asarray(q), axis=1)


def prototype_distance_matrix(bank: PrototypeBank) -> np.ndarray:
    c = bank.C.data
    norms = np.linalg.norm(c, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm prototype; call renormalize first")
    unit = c / norms[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return d


def prototype_distance(bank: PrototypeBank, i: int, j: int) -> float:
    """Cosine distance 1 - cos(c_i, c_j), in [0, 2]."""
    ci, cj = bank.C.data[i], bank.C.data[j]
    ni, nj = np.linalg.norm(ci), np.linalg.norm(cj)
    if ni == 0 or nj == 0:
        raise ValueError("zero-norm prototype; call renormalize first")
    if i == j:
        return 0.0
    return float(1.0 - ci @ cj / (ni * nj))


def gaussian_weights(distances: np.ndarray) -> np.ndarray:
    """exp(-(d - mu)^2 / (2 sigma^2)) row-wise, with per-row population
    mean/std. Rows with sigma below SIGMA_FLOOR get all-ones weights."""
    d = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    mu = d.mean(axis=1, keepdims=True)
    sigma = d.std(axis=1, keepdims=True)
    flat = sigma < SIGMA_FLOOR
    safe = np.where(flat, 1.0, sigma)
    w = np.exp(-((d - mu) ** 2) / (2.0 * safe ** 2))
    return np.where(flat, 1.0, w)


def negative_weights(bank: PrototypeBank, query_cluster: int, batch_clusters) -> np.ndarray:
    """Weights w_ij over the batch for one query cluster."""
    dist = prototype_distance_matrix(bank)
    return gaussian_weights(dist[query_cluster, np.asarray(batch_clusters)])[0]


def negative_weight_matrix(bank: PrototypeBank, clusters) -> np.ndarray:
    """N x N matrix whose row i is ``negative_weights(bank, clusters[i], clusters)``."""
    clusters = np.asarray(clusters)
    dist = prototype_distance_matrix(bank)
    return gaussian_weights(dist[np.ix_(clusters, clusters)])
