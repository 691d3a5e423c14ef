"""``pgcl`` command line: train | eval | ablate | embed.

Resolution order for every training setting: built-in default, then the
``--config`` JSON file, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AUG_KINDS
from .evaluation import (EMBEDDING_SOURCES, EvalConfig, embed_all, evaluate_embeddings,
                         export_embeddings)
from .graphdata import (FEATURE_MODES, ConfigurationError, DatasetFormatError, IngestionError,
                        prepare_dataset, resolve_data_dir)
from .losses import LOSS_MODES
from .train import CheckpointError, TrainConfig, TrainingAborted, load_checkpoint, train

log = logging.getLogger("pgcl")

USAGE_ERROR = 2
RUN_ERROR = 1


class UsageError(Exception):
    pass


# -- argument parsing -----------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a value >= 0, got {text}")
    return v


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help="dataset root (default: $PGCL_DATA_DIR, then ./data)")
    p.add_argument("--dataset", default=None, help="TUDataset name (default MUTAG)")
    p.add_argument("--feature-mode", choices=FEATURE_MODES, default=None,
                   help="node features (default: node-labels when present, else degree-onehot)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (defaults: see README)")
    g.add_argument("--config", help="JSON config file; explicit flags override it")
    g.add_argument("--epochs", type=_positive_int)
    g.add_argument("--lr", type=_nonneg_float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--seed", type=int)
    g.add_argument("--ckpt-every", type=int, help="extra checkpoint every N epochs (0: end only)")
    g.add_argument("--num-layers", type=_positive_int)
    g.add_argument("--hidden", type=_positive_int)
    g.add_argument("--embed-dim", type=_positive_int)
    g.add_argument("--tau", type=float)
    g.add_argument("--lambda", dest="lam", type=float, help="consistency weight (>= 0)")
    g.add_argument("--loss-mode", choices=LOSS_MODES)
    g.add_argument("--num-prototypes", type=_positive_int)
    g.add_argument("--sinkhorn-eps", type=float)
    g.add_argument("--sinkhorn-iters", type=_positive_int)
    g.add_argument("--aug1", choices=AUG_KINDS)
    g.add_argument("--aug2", choices=AUG_KINDS)
    g.add_argument("--aug-ratio", type=float)
    g.add_argument("--mi-masked-sum", action="store_true", default=None,
                   help="normalize reweighting over unmasked negatives only")
    g.add_argument("--symmetric-contrast", action="store_true", default=None,
                   help="average the contrastive term over both view directions")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--folds", type=int, default=10)
    g.add_argument("--repeats", type=_positive_int, default=5)
    g.add_argument("--eval-seed", type=int, default=0)
    g.add_argument("--embedding", choices=EMBEDDING_SOURCES, default="readout",
                   help="representation handed to the classifier")
    g.add_argument("--no-standardize", action="store_true",
                   help="skip per-fold feature standardization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgcl", description="Prototypical graph contrastive learning: train, evaluate, ablate.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train an encoder")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--out-dir", help="output directory (default runs/<timestamp>)")

    p = sub.add_parser("eval", help="evaluate a checkpoint with linear classification")
    _data_flags(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", help="report directory (default: the checkpoint's directory)")
    p.add_argument("--export-embeddings", nargs="?", const="embeddings.csv", default=None,
                   metavar="PATH", help="also write embeddings (default name embeddings.csv)")

    p = sub.add_parser("ablate", help="train and evaluate several loss modes")
    _data_flags(p)
    _train_flags(p)
    _eval_flags(p)
    p.add_argument("--modes", default="infonce,reweighted+consistency",
                   help="comma-separated loss modes")
    p.add_argument("--seeds", default=None, help="comma-separated training seeds (default: --seed)")
    p.add_argument("--parallel", action="store_true", help="run modes in worker processes")
    p.add_argument("--out-dir", help="output directory (default runs/<timestamp>)")

    p = sub.add_parser("embed", help="write embeddings for a dataset")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embedding", choices=EMBEDDING_SOURCES, default="readout")
    p.add_argument("--output", default="embeddings.csv")
    return parser


# -- config resolution -------------------------------------------------------------------

RUN_KEYS = ("dataset", "data_dir", "feature_mode")


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON: {exc}") from exc
    # a manifest carries the resolved config under "train_config"
    if "train_config" in raw:
        merged = dict(raw["train_config"])
        merged.update({k: raw[k] for k in RUN_KEYS if raw.get(k) is not None})
        return merged
    return raw


def resolve_train_config(args: argparse.Namespace, file_cfg: dict) -> TrainConfig:
    base = TrainConfig().to_dict()
    for key, value in file_cfg.items():
        if key in RUN_KEYS:
            continue
        if key not in base:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            unknown = set(value) - set(base[key])
            if unknown:
                raise UsageError(f"unknown {key} keys: {sorted(unknown)}")
            base[key].update(value)
        else:
            base[key] = value

    def flag(name, target=None, sub=None):
        v = getattr(args, name, None)
        if v is None:
            return
        if sub:
            base[sub][target or name] = v
        else:
            base[target or name] = v

    for name in ("epochs", "lr", "batch_size", "optimizer", "seed", "ckpt_every",
                 "num_layers", "hidden", "embed_dim", "num_prototypes"):
        flag(name)
    flag("tau", sub="loss")
    flag("lam", sub="loss")
    flag("loss_mode", "mode", sub="loss")
    flag("mi_masked_sum", sub="loss")
    flag("symmetric_contrast", "symmetric", sub="loss")
    flag("sinkhorn_eps", "eps", sub="sinkhorn")
    flag("sinkhorn_iters", "niters", sub="sinkhorn")
    flag("aug1", "kind", sub="aug1")
    flag("aug2", "kind", sub="aug2")
    if getattr(args, "aug_ratio", None) is not None:
        base["aug1"]["ratio"] = base["aug2"]["ratio"] = args.aug_ratio
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def run_settings(args: argparse.Namespace, file_cfg: dict) -> dict:
    """dataset / data_dir / feature_mode with the same flag-over-file precedence."""
    data_dir = args.data_dir or file_cfg.get("data_dir")
    return {
        "dataset": args.dataset or file_cfg.get("dataset") or "MUTAG",
        "data_dir": str(resolve_data_dir(data_dir)),
        "feature_mode": args.feature_mode or file_cfg.get("feature_mode"),
    }


def default_out_dir() -> Path:
    return Path("runs") / dt.datetime.now().strftime("%Y%m%d-%H%M%S")


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _load(settings: dict):
    return prepare_dataset(settings["data_dir"], settings["dataset"], settings["feature_mode"])


# -- commands ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config)
    cfg = resolve_train_config(args, file_cfg)
    settings = run_settings(args, file_cfg)
    graphs, meta = _load(settings)
    out = Path(args.out_dir) if args.out_dir else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        **settings,
        "feature_mode": meta.feature_source,
        "train_config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "git_revision": _git_revision(),
        "dataset_meta": meta.to_dict(),
        "started_at": _now(),
        "outputs": {"train_log": str(out / "train_log.jsonl"),
                    "checkpoint": str(out / "checkpoint.npz")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("training on %s (%d graphs) -> %s", meta.name, meta.num_graphs, out)
    state, ckpt = train(graphs, cfg, meta, out_dir=out)
    # the manifest stays untouched; completion details go alongside it
    (out / "completed.json").write_text(json.dumps(
        {"finished_at": _now(), "steps": state.step, "epochs": state.epoch,
         "final_loss": state.loss_history[-1] if state.loss_history else None,
         "checkpoint": str(ckpt)}, indent=2))
    print(f"checkpoint: {ckpt}")
    return 0


def _eval_config(args: argparse.Namespace) -> EvalConfig:
    try:
        return EvalConfig(folds=args.folds, repeats=args.repeats, seed=args.eval_seed,
                          standardize=not args.no_standardize)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _checkpoint_settings(args, info: dict) -> dict:
    meta = info.get("dataset") or {}
    return {
        "dataset": args.dataset or meta.get("name") or "MUTAG",
        "data_dir": str(resolve_data_dir(args.data_dir)),
        "feature_mode": args.feature_mode or info.get("feature_source"),
    }


def _open_checkpoint(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args: argparse.Namespace) -> int:
    ecfg = _eval_config(args)
    state, _, info = _open_checkpoint(args.checkpoint)
    graphs, _ = _load(_checkpoint_settings(args, info))
    emb, labels = embed_all(graphs, state, args.embedding)
    report = evaluate_embeddings(emb, labels, ecfg)
    report.config["embedding"] = args.embedding
    report.config["checkpoint"] = str(args.checkpoint)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    path = report.save(out / "eval_report.json")
    if args.export_embeddings:
        target = Path(args.export_embeddings)
        if not target.is_absolute() and target.parent == Path("."):
            target = out / target
        export_embeddings(emb, labels, target)
        print(f"embeddings: {target}")
    print(f"accuracy: {report.summary()}  (report: {path})")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    state, _, info = _open_checkpoint(args.checkpoint)
    graphs, _ = _load(_checkpoint_settings(args, info))
    emb, labels = embed_all(graphs, state, args.embedding)
    print(f"embeddings: {export_embeddings(emb, labels, args.output)}")
    return 0


def _ablation_job(job: tuple) -> dict:
    mode, seed, cfg_dict, settings, ecfg_dict, source = job
    cfg = TrainConfig.from_dict(cfg_dict)
    graphs, meta = _load(settings)
    state, _ = train(graphs, cfg, meta)
    emb, labels = embed_all(graphs, state, source)
    report = evaluate_embeddings(emb, labels, EvalConfig(**ecfg_dict))
    return {"mode": mode, "seed": seed, "mean": report.mean, "std": report.std,
            "fold_accuracies": report.fold_accuracies}


def cmd_ablate(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config)
    cfg = resolve_train_config(args, file_cfg)
    settings = run_settings(args, file_cfg)
    ecfg = _eval_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in LOSS_MODES]
    if bad or not modes:
        raise UsageError(f"unknown loss modes {bad}; choose from {LOSS_MODES}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    _load(settings)  # fail fast on ingestion problems
    jobs = []
    for mode in modes:
        for seed in seeds:
            c = dataclasses.replace(cfg, seed=seed, loss=dataclasses.replace(cfg.loss, mode=mode))
            ecfg_dict = dataclasses.asdict(ecfg)
            ecfg_dict["c_grid"] = tuple(ecfg_dict["c_grid"])
            jobs.append((mode, seed, c.to_dict(), settings, ecfg_dict, args.embedding))
    if args.parallel:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]

    out = Path(args.out_dir) if args.out_dir else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_rows(results, modes)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seeds", "mean_accuracy", "std_over_seeds", "per_seed"])
        for r in rows:
            w.writerow([r["mode"], len(r["per_seed"]), f"{100 * r['mean']:.2f}",
                        f"{100 * r['std']:.2f}", ";".join(f"{100 * a:.2f}" for a in r["per_seed"])])
    (out / "ablation.json").write_text(json.dumps(
        {"settings": settings, "train_config": cfg.to_dict(), "seeds": seeds,
         "eval_config": dataclasses.asdict(ecfg), "embedding": args.embedding,
         "runs": results}, indent=2))
    print(format_table(rows, settings["dataset"]))
    print(f"table: {out / 'ablation.csv'}")
    return 0


def ablation_rows(results: list[dict], modes: list[str]) -> list[dict]:
    rows = []
    for mode in modes:
        accs = [r["mean"] for r in results if r["mode"] == mode]
        rows.append({"mode": mode, "mean": float(np.mean(accs)), "std": float(np.std(accs)),
                     "per_seed": accs})
    return rows


def format_table(rows: list[dict], dataset: str) -> str:
    width = max(len("objective"), *(len(r["mode"]) for r in rows))
    head = f"{'objective':<{width}}  {dataset:>14}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cell = f"{100 * r['mean']:.1f} ± {100 * r['std']:.1f}"
        lines.append(f"{r['mode']:<{width}}  {cell:>14}")
    return "\n".join(lines)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "embed": cmd_embed}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "lam", None) is not None and args.lam < 0:
        parser.error(f"--lambda must be >= 0, got {args.lam}")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pgcl {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (IngestionError, DatasetFormatError, ConfigurationError, CheckpointError,
            TrainingAborted, OSError) as exc:
        print(f"pgcl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUN_ERROR


if __name__ == "__main__":
    sys.exit(main())
