"""Downstream protocol: frozen embeddings, logistic regression, repeated
stratified k-fold accuracy."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import encode
from .graphdata import Graph, make_batch, stratified_folds

C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
# readout: layer-concatenated pooled node states (K_layers * H columns);
# projection: the L2-normalized projection-head output z (D columns)
EMBEDDING_SOURCES = ("readout", "projection")


class DegenerateFitError(ValueError):
    """The training split holds a single class."""


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 10
    repeats: int = 5
    c_grid: tuple[float, ...] = C_GRID
    val_fraction: float = 0.1
    seed: int = 0
    max_iter: int = 5000
    tol: float = 1e-6
    standardize: bool = True

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.c_grid:
            raise ValueError("c_grid must be nonempty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class EvalReport:
    fold_accuracies: list[list[float]]  # [repeat][fold]
    chosen_c: list[list[float]]
    mean: float
    std: float
    repeat_means: list[float]
    runtime_s: float
    config: dict = field(default_factory=dict)

    @property
    def all_accuracies(self) -> np.ndarray:
        return np.array([a for rep in self.fold_accuracies for a in rep])

    def summary(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


# -- embeddings ----------------------------------------------------------------------------

def embed_all(graphs: list[Graph], state, source: str = "readout",
              chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Tape-free, augmentation-free forward over the dataset in file order.

    Returns the embedding matrix (rows in dataset order) and the label vector.
    """
    if source not in EMBEDDING_SOURCES:
        raise ValueError(f"unknown embedding source {source!r}; choose from {EMBEDDING_SOURCES}")
    encoder = state.encoder if hasattr(state, "encoder") else state
    in_dim = encoder.cfg.in_dim
    if graphs and graphs[0].node_features.shape[1] != in_dim:
        from .train import CheckpointError
        raise CheckpointError(
            f"dataset features have {graphs[0].node_features.shape[1]} columns, "
            f"checkpoint encoder expects {in_dim}")
    parts = []
    with T.no_grad():
        for lo in range(0, len(graphs), chunk):
            batch = make_batch(graphs[lo:lo + chunk])
            out = encode(batch, encoder) if source == "projection" else encoder.graph_features(batch)
            parts.append(out.data)
    labels = np.array([-1 if g.label is None else g.label for g in graphs], dtype=np.int64)
    return np.concatenate(parts, axis=0), labels


def export_embeddings(emb: np.ndarray, labels, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_id", "label"] + [f"dim_{d}" for d in range(emb.shape[1])])
        for i, (row, lab) in enumerate(zip(emb, labels)):
            w.writerow([i, int(lab)] + [f"{x:.17g}" for x in row])
    return path


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    emb = np.array([[float(x) for x in r[2:]] for r in rows], dtype=np.float64)
    return emb, labels


# -- classifier ---------------------------------------------------------------------------------

@dataclass
class LogisticModel:
    weights: np.ndarray  # (F, C)
    bias: np.ndarray  # (C,)
    classes: np.ndarray
    n_iter: int
    objective_trace: list[float]
    shift: np.ndarray | None = None  # feature standardization fitted on the training rows
    scale: np.ndarray | None = None

    def decision(self, x: np.ndarray) -> np.ndarray:
        if self.shift is not None:
            x = (x - self.shift) / self.scale
        return x @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision(x), axis=1)]

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))


def _objective(w, b, x, onehot, l2, n):
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    ce = float(np.mean(lse - (logits * onehot).sum(axis=1)))
    return ce + 0.5 * l2 * float((w * w).sum()) / n, logits, lse


def linear_classifier_fit(x: np.ndarray, y: np.ndarray, l2: float, max_iter: int = 5000,
                          tol: float = 1e-6, standardize: bool = False) -> LogisticModel:
    """Multinomial logistic regression by gradient descent with Armijo
    backtracking, started from zero.

    Minimizes mean cross-entropy + l2 / (2n) ||W||^2 (bias unpenalized), i.e.
    the C-weighted sum form with l2 = 1/C, rescaled by 1/(C n).
    Stops when the gradient norm drops below ``tol`` or after ``max_iter``.
    With ``standardize`` each column is shifted and scaled by its mean and
    std over ``x``; the model applies the same map at prediction time.
    """
    x = np.asarray(x, dtype=np.float64)
    shift = scale = None
    if standardize:
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
        x = (x - shift) / scale
    classes, yi = np.unique(y, return_inverse=True)
    if classes.shape[0] < 2:
        raise DegenerateFitError("training split contains a single class")
    n, f = x.shape
    k = classes.shape[0]
    onehot = np.eye(k)[yi]
    w = np.zeros((f, k))
    b = np.zeros(k)
    step = 1.0
    obj, logits, lse = _objective(w, b, x, onehot, l2, n)
    trace = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        prob = np.exp(logits - lse[:, None])
        resid = (prob - onehot) / n
        gw = x.T @ resid + (l2 / n) * w
        gb = resid.sum(axis=0)
        gsq = float((gw * gw).sum() + (gb * gb).sum())
        if np.sqrt(gsq) < tol:
            break
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            obj_new, logits_new, lse_new = _objective(w_new, b_new, x, onehot, l2, n)
            if obj_new <= obj - 1e-4 * step * gsq or step < 1e-12:
                break
            step *= 0.5
        if obj_new > obj:
            break
        w, b, obj, logits, lse = w_new, b_new, obj_new, logits_new, lse_new
        trace.append(obj)
        step = min(step * 2.0, 1e4)
    return LogisticModel(w, b, classes, it, trace, shift, scale)


# -- protocol -------------------------------------------------------------------------------------

def _validation_split(y: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified holdout: per class, round(fraction * count) samples (at least
    one when the class has two or more) go to validation."""
    val = []
    for cls in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == cls))
        take = int(round(fraction * members.shape[0]))
        if members.shape[0] >= 2:
            take = min(max(take, 1), members.shape[0] - 1)
        else:
            take = 0
        val.extend(members[:take])
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(y.shape[0]), val)
    return train, val


def select_c(x: np.ndarray, y: np.ndarray, cfg: EvalConfig, rng: np.random.Generator) -> float:
    """Grid value with the best inner-validation accuracy; ties -> smaller C."""
    tr, va = _validation_split(y, cfg.val_fraction, rng)
    best_c, best_acc = None, -1.0
    for c in sorted(cfg.c_grid):
        try:
            model = linear_classifier_fit(x[tr], y[tr], 1.0 / c, cfg.max_iter, cfg.tol,
                                          cfg.standardize)
        except DegenerateFitError:
            continue
        acc = model.accuracy(x[va], y[va])
        if acc > best_acc:
            best_c, best_acc = c, acc
    return min(cfg.c_grid) if best_c is None else best_c


def evaluate_embeddings(emb: np.ndarray, labels: np.ndarray,
                        cfg: EvalConfig | None = None) -> EvalReport:
    """Repeated stratified k-fold accuracy of a logistic classifier.

    Repeat r uses fold seed ``cfg.seed + r``; results are keyed by
    (repeat, fold) so they do not depend on evaluation order.
    """
    cfg = cfg or EvalConfig()
    t0 = time.perf_counter()
    labels = np.asarray(labels)
    accs, chosen = [], []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        rep_acc, rep_c = [], []
        for f, (tr, te) in enumerate(stratified_folds(labels, cfg.folds, seed)):
            rng = np.random.default_rng(np.random.SeedSequence([seed, f, 0xC]))
            c = select_c(emb[tr], labels[tr], cfg, rng)
            model = linear_classifier_fit(emb[tr], labels[tr], 1.0 / c, cfg.max_iter, cfg.tol,
                                          cfg.standardize)
            rep_acc.append(model.accuracy(emb[te], labels[te]))
            rep_c.append(c)
        accs.append(rep_acc)
        chosen.append(rep_c)
    flat = np.array([a for rep in accs for a in rep])
    return EvalReport(
        fold_accuracies=accs,
        chosen_c=chosen,
        mean=float(flat.mean()),
        std=float(flat.std()),
        repeat_means=[float(np.mean(rep)) for rep in accs],
        runtime_s=time.perf_counter() - t0,
        config=dataclasses.asdict(cfg),
    )


def evaluate(graphs: list[Graph], state, cfg: EvalConfig | None = None,
             source: str = "readout") -> EvalReport:
    emb, labels = embed_all(graphs, state, source)
    return evaluate_embeddings(emb, labels, cfg)
