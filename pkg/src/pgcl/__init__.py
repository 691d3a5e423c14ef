"""Prototypical graph contrastive learning on a small numpy autodiff core."""

from .encoder import EncoderConfig, GinEncoder, encode
from .evaluation import EvalConfig, EvalReport, embed_all, evaluate, evaluate_embeddings
from .graphdata import Graph, load_tudataset, make_batch, prepare_dataset
from .losses import LossConfig, combined
from .prototypes import PrototypeBank, SinkhornConfig, sinkhorn
from .train import TrainConfig, load_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "GinEncoder", "encode",
    "EvalConfig", "EvalReport", "embed_all", "evaluate", "evaluate_embeddings",
    "Graph", "load_tudataset", "make_batch", "prepare_dataset",
    "LossConfig", "combined",
    "PrototypeBank", "SinkhornConfig", "sinkhorn",
    "TrainConfig", "load_checkpoint", "train", "train_step",
]
