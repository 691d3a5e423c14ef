"""TUDataset ingestion, node features, batching and stratified folds."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEGREE_CAP = 400
FEATURE_MODES = ("node-labels", "degree-onehot", "constant")


class IngestionError(Exception):
    """A mandatory dataset file is missing or unreadable."""


class DatasetFormatError(Exception):
    """A dataset file is syntactically or referentially broken."""


class ConfigurationError(Exception):
    pass


class StratificationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, each undirected edge once, u < v
    node_features: np.ndarray | None = None
    label: int | None = None
    node_labels: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", e)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(min(u, v)), int(max(u, v))) for u, v in self.edges}

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)


def validate_graph(g: Graph) -> None:
    """Raise ``DatasetFormatError`` if ``g`` breaks a Graph invariant."""
    if g.num_nodes < 1:
        raise DatasetFormatError("graph has no nodes")
    if g.edges.size:
        if g.edges.min() < 0 or g.edges.max() >= g.num_nodes:
            raise DatasetFormatError("edge endpoint out of range")
        if np.any(g.edges[:, 0] == g.edges[:, 1]):
            raise DatasetFormatError("self-loop stored")
        if len(g.edge_set()) != g.num_edges:
            raise DatasetFormatError("duplicate undirected edge")
    if g.node_features is not None and g.node_features.shape[0] != g.num_nodes:
        raise DatasetFormatError(
            f"feature rows {g.node_features.shape[0]} != num_nodes {g.num_nodes}")
    if g.node_labels is not None and len(g.node_labels) != g.num_nodes:
        raise DatasetFormatError("node label count != num_nodes")


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    num_graphs: int
    num_classes: int
    avg_nodes: float
    feature_dim: int = 0
    feature_source: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(eq=False)
class GraphBatch:
    node_features: np.ndarray
    edges: np.ndarray  # offset-shifted undirected pairs
    graph_index: np.ndarray  # node -> graph
    batch_size: int
    node_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def total_nodes(self) -> int:
        return int(self.graph_index.shape[0])

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.node_counts)[:-1]]).astype(np.int64)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Both directions of every edge as (src, dst) index arrays."""
        if self.edges.size == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return src, dst


# -- file format -------------------------------------------------------------------

def _read_int_column(path: Path) -> np.ndarray:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(line.split(",")[0]))
            except ValueError:
                raise DatasetFormatError(f"{path.name}:{lineno}: not an integer: {line!r}")
    return np.asarray(values, dtype=np.int64)


def _require(directory: Path, name: str, suffix: str) -> Path:
    p = directory / f"{name}_{suffix}.txt"
    if not p.is_file():
        raise IngestionError(f"missing dataset file: {p}")
    return p


def resolve_data_dir(flag: str | os.PathLike | None) -> Path:
    """``--data-dir`` wins over PGCL_DATA_DIR; the fallback is ./data."""
    if flag:
        return Path(flag)
    env = os.environ.get("PGCL_DATA_DIR")
    return Path(env) if env else Path("data")


def load_tudataset(directory: str | os.PathLike, name: str) -> tuple[list[Graph], DatasetMeta]:
    """Parse a TUDataset benchmark.

    ``directory`` may either hold the ``<name>_*.txt`` files directly or contain
    a ``<name>/`` subdirectory holding them. File indices are 1-based; the
    returned graphs use 0-based node ids and labels remapped to 0..C-1.
    """
    root = Path(directory)
    if (root / name).is_dir():
        root = root / name
    a_path = _require(root, name, "A")
    indicator = _read_int_column(_require(root, name, "graph_indicator"))
    raw_labels = _read_int_column(_require(root, name, "graph_labels"))
    nl_path = root / f"{name}_node_labels.txt"
    node_labels = _read_int_column(nl_path) if nl_path.is_file() else None

    total_nodes = indicator.shape[0]
    num_graphs = raw_labels.shape[0]
    if total_nodes == 0 or num_graphs == 0:
        raise DatasetFormatError(f"{name}: empty dataset")
    if indicator.min() < 1 or indicator.max() > num_graphs:
        raise DatasetFormatError(f"{name}_graph_indicator.txt: graph id outside 1..{num_graphs}")
    if np.any(np.diff(indicator) < 0):
        raise DatasetFormatError(f"{name}_graph_indicator.txt: graph ids not grouped")
    if node_labels is not None and node_labels.shape[0] != total_nodes:
        raise DatasetFormatError(
            f"{name}_node_labels.txt: {node_labels.shape[0]} lines for {total_nodes} nodes")

    graph_of = indicator - 1
    counts = np.bincount(graph_of, minlength=num_graphs)
    if np.any(counts == 0):
        raise DatasetFormatError(f"{name}: graph {int(np.argmin(counts)) + 1} has no nodes")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    per_graph: list[dict[tuple[int, int], None]] = [dict() for _ in range(num_graphs)]
    with open(a_path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                u_s, v_s = line.split(",")
                u, v = int(u_s) - 1, int(v_s) - 1
            except ValueError:
                raise DatasetFormatError(f"{a_path.name}:{lineno}: malformed edge {line!r}")
            if not (0 <= u < total_nodes and 0 <= v < total_nodes):
                raise DatasetFormatError(f"{a_path.name}:{lineno}: dangling node index {line!r}")
            gu, gv = graph_of[u], graph_of[v]
            if gu != gv:
                raise DatasetFormatError(f"{a_path.name}:{lineno}: edge crosses graphs {line!r}")
            if u == v:
                continue
            lo, hi = (u, v) if u < v else (v, u)
            per_graph[gu][(lo - starts[gu], hi - starts[gu])] = None

    classes = np.unique(raw_labels)
    remap = {int(c): i for i, c in enumerate(classes)}
    graphs = []
    for gi in range(num_graphs):
        lo = starts[gi]
        edges = np.array(list(per_graph[gi].keys()), dtype=np.int64).reshape(-1, 2)
        graphs.append(Graph(
            num_nodes=int(counts[gi]),
            edges=edges,
            label=remap[int(raw_labels[gi])],
            node_labels=None if node_labels is None else node_labels[lo:lo + counts[gi]].copy(),
        ))
    meta = DatasetMeta(
        name=name,
        num_graphs=num_graphs,
        num_classes=len(classes),
        avg_nodes=float(total_nodes) / num_graphs,
    )
    return graphs, meta


def write_tudataset(graphs: list[Graph], directory: str | os.PathLike, name: str) -> Path:
    """Serialize graphs in TUDataset text format (both edge directions written)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(root / f"{name}_A.txt", "w") as fa, \
            open(root / f"{name}_graph_indicator.txt", "w") as fi, \
            open(root / f"{name}_graph_labels.txt", "w") as fl:
        for gi, g in enumerate(graphs, 1):
            for u, v in g.edges:
                fa.write(f"{u + offset + 1}, {v + offset + 1}\n")
                fa.write(f"{v + offset + 1}, {u + offset + 1}\n")
            fi.writelines(f"{gi}\n" for _ in range(g.num_nodes))
            fl.write(f"{0 if g.label is None else g.label}\n")
            offset += g.num_nodes
    if all(g.node_labels is not None for g in graphs):
        with open(root / f"{name}_node_labels.txt", "w") as fn:
            for g in graphs:
                fn.writelines(f"{int(x)}\n" for x in g.node_labels)
    return root


# -- features ------------------------------------------------------------------------

def default_feature_mode(graphs: list[Graph]) -> str:
    return "node-labels" if all(g.node_labels is not None for g in graphs) else "degree-onehot"


def build_features(graphs: list[Graph], mode: str,
                   max_degree: int = DEGREE_CAP) -> tuple[list[Graph], int]:
    """Attach a uniform-width node feature matrix to every graph.

    Returns the new graphs and the feature width F.
    """
    if mode not in FEATURE_MODES:
        raise ConfigurationError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    if mode == "node-labels":
        if any(g.node_labels is None for g in graphs):
            raise ConfigurationError("node-labels features requested but dataset has no node labels")
        width = int(max(g.node_labels.max() for g in graphs)) + 1
        if min(g.node_labels.min() for g in graphs) < 0:
            raise DatasetFormatError("negative node label")
        make = lambda g: np.eye(width)[g.node_labels]  # noqa: E731
    elif mode == "degree-onehot":
        cap = min(max_degree, int(max(int(g.degrees().max(initial=0)) for g in graphs)))
        width = cap + 1
        make = lambda g: np.eye(width)[np.minimum(g.degrees(), cap)]  # noqa: E731
    else:
        width = 1
        make = lambda g: np.ones((g.num_nodes, 1))  # noqa: E731
    return [dataclasses.replace(g, node_features=make(g)) for g in graphs], width


def prepare_dataset(directory, name: str, mode: str | None = None) -> tuple[list[Graph], DatasetMeta]:
    """Load + featurize in one call; ``mode=None`` picks the dataset default."""
    graphs, meta = load_tudataset(directory, name)
    mode = mode or default_feature_mode(graphs)
    graphs, width = build_features(graphs, mode)
    meta = dataclasses.replace(meta, feature_dim=width, feature_source=mode)
    return graphs, meta


# -- batching ------------------------------------------------------------------------

def make_batch(graphs: list[Graph]) -> GraphBatch:
    if not graphs:
        raise ValueError("make_batch needs at least one graph")
    counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    edges = [g.edges + off for g, off in zip(graphs, offsets)]
    feats = [g.node_features for g in graphs]
    if any(f is None for f in feats):
        raise ConfigurationError("graphs have no node features; call build_features first")
    return GraphBatch(
        node_features=np.concatenate(feats, axis=0),
        edges=np.concatenate(edges, axis=0).reshape(-1, 2),
        graph_index=np.repeat(np.arange(len(graphs)), counts),
        batch_size=len(graphs),
        node_counts=counts,
    )


def unbatch(batch: GraphBatch) -> list[Graph]:
    out = []
    offs = batch.offsets
    owner = batch.graph_index[batch.edges[:, 0]] if batch.edges.size else np.zeros(0, dtype=np.int64)
    for gi, (off, n) in enumerate(zip(offs, batch.node_counts)):
        e = batch.edges[owner == gi] - off
        out.append(Graph(num_nodes=int(n), edges=e,
                         node_features=batch.node_features[off:off + n]))
    return out


# -- cross validation ------------------------------------------------------------------

def stratified_folds(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded stratified k-fold split.

    Each class is shuffled and dealt round-robin over the folds; the starting
    fold rotates with the running total so fold sizes stay within one sample.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.shape[0], dtype=np.int64)
    start = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.shape[0] < k:
            raise StratificationError(
                f"class {cls!r} has {members.shape[0]} members, fewer than k={k}")
        members = rng.permutation(members)
        fold_of[members] = (start + np.arange(members.shape[0])) % k
        start = (start + members.shape[0]) % k
    idx = np.arange(labels.shape[0])
    return [(idx[fold_of != f], idx[fold_of == f]) for f in range(k)]
