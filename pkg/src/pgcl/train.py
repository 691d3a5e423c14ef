"""Optimization loop: views -> encode -> prototype scores -> Sinkhorn targets
-> combined loss -> update encoder and prototypes -> renormalize prototypes."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, graph_rng, make_views
from .encoder import EncoderConfig, GinEncoder, encode
from .graphdata import DatasetMeta, Graph, make_batch
from .losses import BatchViews, LossConfig, combined
from .prototypes import (PrototypeBank, SinkhornConfig, hard_assign, prototype_scores,
                         renormalize, sinkhorn)
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
OPTIMIZERS = ("adam", "sgd")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, report: StepReport):
        super().__init__(f"{message}: {report.to_log()}")
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    num_layers: int = 3
    hidden: int = 32
    embed_dim: int = 32
    readout: str | None = None  # None: sum for labelled nodes, mean otherwise
    normalize_embeddings: bool = True
    num_prototypes: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    aug1: AugmentConfig = field(default_factory=lambda: AugmentConfig("node-drop", 0.2))
    aug2: AugmentConfig = field(default_factory=lambda: AugmentConfig("edge-perturb", 0.2))
    ckpt_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.num_prototypes < 1:
            raise ValueError("num_prototypes must be >= 1")

    def encoder_config(self, in_dim: int, feature_source: str = "node-labels") -> EncoderConfig:
        readout = self.readout or ("sum" if feature_source == "node-labels" else "mean")
        return EncoderConfig(in_dim=in_dim, num_layers=self.num_layers, hidden=self.hidden,
                             embed_dim=self.embed_dim, readout=readout,
                             normalize_embeddings=self.normalize_embeddings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        nested = {"loss": LossConfig, "sinkhorn": SinkhornConfig,
                  "aug1": AugmentConfig, "aug2": AugmentConfig}
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        return cls(**d)


# -- optimizers -------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for i, p in enumerate(self.params):
            self.m[i] = np.array(arrays[f"adam.m.{p.name}"])
            self.v[i] = np.array(arrays[f"adam.v.{p.name}"])


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t


# -- state ----------------------------------------------------------------------------

@dataclass
class StepReport:
    step: int
    epoch: int
    loss: float
    components: dict[str, float]
    cluster_histogram: list[int]
    target_mass: np.ndarray | None = None  # column sums of the view-1 targets Q
    target_row_sums: np.ndarray | None = None

    def to_log(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "loss": self.loss,
            "loss_reweighted": self.components.get("loss_reweighted",
                                                   self.components.get("loss_infonce")),
            "loss_consistency": self.components.get("loss_consistency"),
            "cluster_histogram": self.cluster_histogram,
        }


@dataclass
class TrainState:
    encoder: GinEncoder
    bank: PrototypeBank
    optimizer: Adam | SGD
    epoch: int = 0  # completed epochs
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    feature_source: str = "node-labels"

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + [self.bank.C]


def init_state(cfg: TrainConfig, in_dim: int, feature_source: str = "node-labels") -> TrainState:
    enc_cfg = cfg.encoder_config(in_dim, feature_source)
    encoder = GinEncoder(enc_cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    bank = PrototypeBank(cfg.num_prototypes, cfg.embed_dim,
                         np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    params = encoder.parameters() + [bank.C]
    opt = Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)
    return TrainState(encoder, bank, opt, feature_source=feature_source)


# -- the step ---------------------------------------------------------------------------

def forward_views(state: TrainState, graphs: list[Graph], graph_ids, cfg: TrainConfig,
                  epoch: int) -> BatchViews:
    n = len(graphs)
    view1, view2 = [], []
    for g, gid in zip(graphs, graph_ids):
        a, b = make_views(g, cfg.aug1, cfg.aug2, graph_rng(cfg.seed, epoch, int(gid)))
        view1.append(a)
        view2.append(b)
    z_all = encode(make_batch(view1 + view2), state.encoder)
    scores = prototype_scores(z_all, state.bank)
    first, second = np.arange(n), np.arange(n, 2 * n)
    s1, s2 = T.take_rows(scores, first), T.take_rows(scores, second)
    q = sinkhorn(s1.data, cfg.sinkhorn)
    q2 = sinkhorn(s2.data, cfg.sinkhorn)
    return BatchViews(
        z=T.take_rows(z_all, first),
        z2=T.take_rows(z_all, second),
        p=T.row_softmax(s1, cfg.loss.tau),
        p2=T.row_softmax(s2, cfg.loss.tau),
        q=q,
        q2=q2,
        clusters=hard_assign(q),
    )


def train_step(state: TrainState, graphs: list[Graph], cfg: TrainConfig,
               graph_ids=None, epoch: int | None = None) -> StepReport:
    """One optimizer step on a batch of >= 2 graphs; mutates ``state``."""
    if len(graphs) < 2:
        raise ValueError("a training batch needs at least 2 graphs")
    if graph_ids is None:
        graph_ids = range(len(graphs))
    epoch = state.epoch if epoch is None else epoch
    views = forward_views(state, graphs, graph_ids, cfg, epoch)
    loss, parts = combined(views, state.bank, cfg.loss)
    hist = np.bincount(views.clusters, minlength=state.bank.K)
    report = StepReport(
        step=state.step, epoch=epoch, loss=loss.item(), components=parts,
        cluster_histogram=[int(x) for x in hist],
        target_mass=views.q.sum(axis=0), target_row_sums=views.q.sum(axis=1),
    )
    if not math.isfinite(report.loss) or not all(math.isfinite(v) for v in parts.values()):
        raise TrainingAborted("non-finite loss", report)
    for p in state.parameters():
        p.zero_grad()
    if loss.requires_grad:
        T.backward(loss)
    state.optimizer.step()
    renormalize(state.bank)
    state.step += 1
    state.loss_history.append(report.loss)
    return report


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5EED])).permutation(n)


def epoch_batches(seed: int, epoch: int, n: int, batch_size: int) -> list[np.ndarray]:
    """Seeded shuffle split into batches; a trailing batch of one graph is dropped."""
    order = epoch_order(seed, epoch, n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if b.shape[0] >= 2]


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig,
                    meta: DatasetMeta | None = None) -> Path:
    """Write an ``.npz`` holding every parameter matrix by name plus a JSON
    ``__meta__`` record (format version, configs, counters)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.data for name, p in state.encoder.named_parameters().items()}
    arrays["prototypes"] = state.bank.C.data
    arrays.update(state.optimizer.state_arrays())
    info = {
        "format": "pgcl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "train_config": cfg.to_dict(),
        "encoder_config": state.encoder.cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "feature_source": state.feature_source,
        "dataset": None if meta is None else meta.to_dict(),
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(info).encode(), dtype=np.uint8)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


class CheckpointError(Exception):
    pass


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} is not a pgcl checkpoint")
    info = json.loads(arrays.pop("__meta__").tobytes().decode())
    if info.get("format") != "pgcl-checkpoint" or info.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {info.get('version')}")
    cfg = TrainConfig.from_dict(info["train_config"])
    enc_cfg = EncoderConfig(**info["encoder_config"])
    state = init_state(cfg, enc_cfg.in_dim, info.get("feature_source", "node-labels"))
    if state.encoder.cfg != enc_cfg:
        state.encoder = GinEncoder(enc_cfg, np.random.default_rng(0))
        params = state.encoder.parameters() + [state.bank.C]
        state.optimizer = (Adam(params, cfg.lr) if cfg.optimizer == "adam"
                           else SGD(params, cfg.lr))
    state.encoder.load_arrays(arrays)
    state.bank.C.data = np.array(arrays["prototypes"])
    state.optimizer.load_state(arrays, info["optimizer_t"])
    state.epoch = info["epoch"]
    state.step = info["step"]
    return state, cfg, info


# -- the loop -------------------------------------------------------------------------------

def train(graphs: list[Graph], cfg: TrainConfig, meta: DatasetMeta | None = None,
          out_dir: str | Path | None = None, resume: TrainState | None = None,
          on_step=None) -> tuple[TrainState, Path | None]:
    """Run ``cfg.epochs`` epochs (continuing from ``resume`` if given).

    With ``out_dir`` set, step reports are appended to ``train_log.jsonl`` and
    checkpoints written every ``cfg.ckpt_every`` epochs and at the end.
    """
    if not graphs:
        raise ValueError("cannot train on an empty dataset")
    if graphs[0].node_features is None:
        raise ValueError("graphs have no node features; call build_features first")
    in_dim = graphs[0].node_features.shape[1]
    source = meta.feature_source if meta and meta.feature_source else "node-labels"
    state = resume or init_state(cfg, in_dim, source)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume else "w")
    try:
        while state.epoch < cfg.epochs:
            epoch = state.epoch
            losses = []
            for idx in epoch_batches(cfg.seed, epoch, len(graphs), cfg.batch_size):
                report = train_step(state, [graphs[i] for i in idx], cfg, idx, epoch)
                losses.append(report.loss)
                if log_fh is not None:
                    log_fh.write(json.dumps(report.to_log()) + "\n")
                if on_step is not None:
                    on_step(report)
            state.epoch += 1
            log.info("epoch %d/%d mean loss %.6f", state.epoch, cfg.epochs,
                     float(np.mean(losses)) if losses else float("nan"))
            if out is not None and cfg.ckpt_every and state.epoch % cfg.ckpt_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{state.epoch}.npz", state, cfg, meta)
        if out is not None:
            ckpt = save_checkpoint(out / "checkpoint.npz", state, cfg, meta)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, ckpt
