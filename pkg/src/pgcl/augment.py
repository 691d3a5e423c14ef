"""Stochastic graph views: node dropping and edge perturbation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .graphdata import Graph

AUG_KINDS = ("node-drop", "edge-perturb", "identity")

# enumerate candidate non-edges up to this many node pairs, rejection-sample beyond
_ENUMERATE_PAIRS = 200_000


@dataclass(frozen=True)
class AugmentConfig:
    kind: str = "node-drop"
    ratio: float = 0.2

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; choose from {AUG_KINDS}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"augmentation ratio must be in [0, 1), got {self.ratio}")


def graph_rng(seed: int, epoch: int, graph_index: int) -> np.random.Generator:
    """Stream keyed by (seed, epoch, graph), so a graph's views do not depend
    on which other graphs share its batch. ``make_views`` spawns one child
    stream per view from it."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, graph_index]))


def _subgraph(g: Graph, keep: np.ndarray) -> Graph:
    keep = np.sort(keep)
    new_id = np.full(g.num_nodes, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.shape[0])
    if g.num_edges:
        mapped = new_id[g.edges]
        edges = mapped[(mapped >= 0).all(axis=1)]
    else:
        edges = g.edges
    return dataclasses.replace(
        g,
        num_nodes=int(keep.shape[0]),
        edges=edges,
        node_features=None if g.node_features is None else g.node_features[keep],
        node_labels=None if g.node_labels is None else g.node_labels[keep],
    )


def node_drop(g: Graph, ratio: float, rng: np.random.Generator) -> Graph:
    n_drop = int(np.floor(ratio * g.num_nodes))
    if n_drop == 0:
        return g
    if n_drop >= g.num_nodes:
        return _subgraph(g, rng.choice(g.num_nodes, 1, replace=False))
    dropped = rng.choice(g.num_nodes, n_drop, replace=False)
    keep = np.setdiff1d(np.arange(g.num_nodes), dropped)
    return _subgraph(g, keep)


def _sample_non_edges(g: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    n = g.num_nodes
    existing = g.edge_set()
    total_pairs = n * (n - 1) // 2
    available = total_pairs - len(existing)
    count = min(count, available)
    if count <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    if total_pairs <= _ENUMERATE_PAIRS:
        iu, iv = np.triu_indices(n, k=1)
        if existing:
            ex = np.array(sorted(existing), dtype=np.int64)
            key = iu * n + iv
            mask = ~np.isin(key, ex[:, 0] * n + ex[:, 1])
            iu, iv = iu[mask], iv[mask]
        pick = rng.choice(iu.shape[0], count, replace=False)
        return np.stack([iu[pick], iv[pick]], axis=1)
    chosen: dict[tuple[int, int], None] = {}
    while len(chosen) < count:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        pair = (int(min(u, v)), int(max(u, v)))
        if pair in existing or pair in chosen:
            continue
        chosen[pair] = None
    return np.array(list(chosen), dtype=np.int64).reshape(-1, 2)


def edge_perturb(g: Graph, ratio: float, rng: np.random.Generator) -> Graph:
    """Remove floor(ratio*|E|) edges and add as many fresh non-edges.

    Non-edges are taken relative to the input graph, so a removed edge is
    never re-added; on near-complete graphs fewer edges may be added.
    """
    m = int(np.floor(ratio * g.num_edges))
    if m == 0:
        return g
    keep = np.sort(rng.choice(g.num_edges, g.num_edges - m, replace=False))
    added = _sample_non_edges(g, m, rng)
    edges = np.concatenate([g.edges[keep], added], axis=0)
    return dataclasses.replace(g, edges=edges)


def apply(g: Graph, cfg: AugmentConfig, rng: np.random.Generator) -> Graph:
    if cfg.kind == "node-drop":
        return node_drop(g, cfg.ratio, rng)
    if cfg.kind == "edge-perturb":
        return edge_perturb(g, cfg.ratio, rng)
    return g


def make_views(g: Graph, cfg1: AugmentConfig, cfg2: AugmentConfig,
               rng: np.random.Generator) -> tuple[Graph, Graph]:
    r1, r2 = rng.spawn(2)
    return apply(g, cfg1, r1), apply(g, cfg2, r2)
