"""GIN-0 encoder with layer-concatenated readout and a two-layer projection head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphdata import GraphBatch
from .tensor import Tensor

READOUTS = ("sum", "mean")


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int
    num_layers: int = 3
    hidden: int = 32
    embed_dim: int = 32
    readout: str = "sum"
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.embed_dim < 1 or self.hidden < 1 or self.in_dim < 1:
            raise ValueError("layer widths must be positive")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.weight = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Affine -> ReLU -> affine."""

    def __init__(self, widths: tuple[int, int, int], rng: np.random.Generator, name: str):
        self.lin1 = Linear(widths[0], widths[1], rng, f"{name}.0")
        self.lin2 = Linear(widths[1], widths[2], rng, f"{name}.1")

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))

    def parameters(self) -> list[Tensor]:
        return self.lin1.parameters() + self.lin2.parameters()


class GinLayer:
    epsilon = 0.0  # GIN-0: not learned

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, name: str):
        self.mlp = MLP((in_dim, hidden, hidden), rng, f"{name}.mlp")

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


def neighbor_sum(h: Tensor, batch: GraphBatch) -> Tensor:
    src, dst = batch.directed_edges()
    if src.size == 0:
        return T.Tensor(np.zeros(h.shape))
    return T.segment_sum(T.take_rows(h, src), dst, batch.total_nodes)


def gin_layer_forward(h: Tensor, batch: GraphBatch, layer) -> Tensor:
    """h'_v = MLP((1 + eps) h_v + sum of neighbor rows).

    ``layer`` is a GinLayer or any callable MLP (tests pass the identity).
    """
    if h.shape[0] != batch.total_nodes:
        raise T.ShapeError(f"{h.shape[0]} feature rows for {batch.total_nodes} nodes")
    eps = getattr(layer, "epsilon", 0.0)
    mlp = layer.mlp if isinstance(layer, GinLayer) else layer
    self_term = h if eps == 0.0 else T.scale(h, 1.0 + eps)
    return mlp(self_term + neighbor_sum(h, batch))


def readout(per_layer: list[Tensor], batch: GraphBatch, mode: str = "sum") -> Tensor:
    """Pool each layer's node rows per graph, then concatenate the layers."""
    pooled = []
    counts = None
    for h in per_layer:
        if h.shape[0] != batch.total_nodes:
            raise T.ShapeError("readout: layer outputs must share total_nodes rows")
        p = T.segment_sum(h, batch.graph_index, batch.batch_size)
        if mode == "mean":
            if counts is None:
                counts = np.bincount(batch.graph_index, minlength=batch.batch_size)
                counts = 1.0 / np.maximum(counts, 1).reshape(-1, 1)
            p = T.mul(p, counts)
        pooled.append(p)
    return pooled[0] if len(pooled) == 1 else T.concat_cols(pooled)


class GinEncoder:
    """f_theta: GraphBatch -> N x D graph embeddings."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = []
        width = cfg.in_dim
        for i in range(cfg.num_layers):
            self.layers.append(GinLayer(width, cfg.hidden, rng, f"gin{i}"))
            width = cfg.hidden
        self.projection = MLP((cfg.num_layers * cfg.hidden, cfg.hidden, cfg.embed_dim),
                              rng, "proj")

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params += layer.parameters()
        return params + self.projection.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def graph_features(self, batch: GraphBatch) -> Tensor:
        """Readout before the projection head."""
        if batch.node_features.shape[1] != self.cfg.in_dim:
            raise T.ShapeError(
                f"node features have {batch.node_features.shape[1]} columns, "
                f"encoder expects {self.cfg.in_dim}")
        h = Tensor(batch.node_features)
        per_layer = []
        for layer in self.layers:
            h = gin_layer_forward(h, batch, layer)
            per_layer.append(h)
        return readout(per_layer, batch, self.cfg.readout)

    def __call__(self, batch: GraphBatch) -> Tensor:
        return encode(batch, self)


def encode(batch: GraphBatch, encoder: GinEncoder) -> Tensor:
    z = encoder.projection(encoder.graph_features(batch))
    if encoder.cfg.normalize_embeddings:
        z = T.l2_normalize_rows(z)
    return z
