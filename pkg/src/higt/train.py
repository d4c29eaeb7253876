"""Stratified k-fold splits, the training loop and AUC/ACC reporting."""
from __future__ import annotations

import copy
import json
import logging
import resource
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig
from .graph import HierarchicalGraph
from .metrics import UndefinedMetricError, accuracy, auc
from .model import HIGT, build_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def kfold_split(labels: Sequence[int], k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds: each class is shuffled and dealt round-robin over the folds."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < k]
    if len(small):
        raise ValueError(f"classes {small.tolist()} have fewer than k={k} members")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    start = 0
    for cls in classes:
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        # rotate the dealing start so fold sizes stay balanced across classes
        fold_of[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    all_idx = np.arange(len(labels))
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


@dataclass
class History:
    step_loss: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


def _loss(model: HIGT, graph: HierarchicalGraph) -> torch.Tensor:
    logits = model(graph)
    target = torch.tensor([graph.label])
    return F.cross_entropy(logits[None], target)


def predict_all(model: HIGT, graphs: Sequence[HierarchicalGraph]) -> tuple[np.ndarray, np.ndarray]:
    preds = [model.predict(g) for g in graphs]
    return np.stack([p.probs for p in preds]), np.array([p.pred for p in preds])


def _score(model: HIGT, graphs: Sequence[HierarchicalGraph]) -> dict:
    probs, pred = predict_all(model, graphs)
    labels = np.array([g.label for g in graphs])
    out = {"acc": accuracy(pred, labels)}
    try:
        out["auc"] = auc(probs if probs.shape[1] > 2 else probs[:, 1], labels)
    except UndefinedMetricError:
        out["auc"] = float("nan")
    eps = 1e-12
    out["loss"] = float(-np.mean(np.log(probs[np.arange(len(labels)), labels] + eps)))
    return out


def train(graphs: Sequence[HierarchicalGraph], config: ModelConfig,
          val_graphs: Sequence[HierarchicalGraph] | None = None, seed: int | None = None,
          keep: str = "best_val", max_steps: int | None = None,
          callback: Callable[[int, dict], None] | None = None) -> tuple[HIGT, History]:
    """Adam on per-slide cross-entropy, gradients accumulated over ``batch_size`` slides.

    ``keep="best_val"`` returns the weights of the epoch with the best validation
    AUC (ties broken by lower validation loss); ``keep="last"`` returns the final
    weights.  Without validation graphs the final weights are returned.
    """
    if not graphs:
        raise TrainingError("empty training split")
    if any(g.label < 0 or g.label >= config.num_classes for g in graphs):
        raise TrainingError("training graphs need labels in [0, num_classes)")
    seed = config.seed if seed is None else seed
    model = build_model(config, seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    history = History()
    best_key, best_state = None, None
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(graphs))
        epoch_loss = []
        for start in range(0, len(order), config.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            batch = [graphs[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for g in batch:
                loss = _loss(model, g) / len(batch)
                loss.backward()
                total += loss.item()
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step()
            history.step_loss.append(total)
            epoch_loss.append(total)
            step += 1
        if not epoch_loss:
            break
        record = {"epoch": epoch, "train_loss": float(np.mean(epoch_loss))}
        if val_graphs:
            metrics = _score(model, val_graphs)
            record.update({f"val_{k}": v for k, v in metrics.items()})
            key = (np.nan_to_num(metrics["auc"], nan=-1.0), -metrics["loss"])
            if best_key is None or key > best_key:
                best_key, best_state = key, copy.deepcopy(model.state_dict())
                history.best_epoch = epoch
        history.epochs.append(record)
        if callback is not None:
            callback(epoch, record)
        log.debug("epoch %d %s", epoch, record)
    if keep == "best_val" and best_state is not None:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = len(history.epochs) - 1
    model.eval()
    return model, history


# --------------------------------------------------------------------------- reports

@dataclass
class EvalReport:
    runs: list[dict]
    auc_mean: float
    auc_std: float
    acc_mean: float
    acc_std: float
    config_hash: str = ""
    label: str = ""
    param_count: int = 0
    loss_curves: list[list[float]] = field(default_factory=list)

    @classmethod
    def from_runs(cls, runs: list[dict], **kw) -> "EvalReport":
        if not runs:
            raise ValueError("no runs to report")
        aucs = np.array([r["auc"] for r in runs], dtype=np.float64)
        accs = np.array([r["acc"] for r in runs], dtype=np.float64)
        ddof = 1 if len(runs) > 1 else 0
        return cls(runs=runs,
                   auc_mean=float(np.nanmean(aucs)), auc_std=float(np.nanstd(aucs, ddof=ddof)),
                   acc_mean=float(np.mean(accs)), acc_std=float(np.std(accs, ddof=ddof)), **kw)

    def summary(self) -> str:
        return f"AUC {self.auc_mean:.2f} ± {self.auc_std:.2f} | ACC {self.acc_mean:.2f} ± {self.acc_std:.2f}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def format_metric(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def evaluate(model: HIGT, graphs: Sequence[HierarchicalGraph], label: str = "") -> EvalReport:
    """Score one model on one dataset; AUC and ACC as percentages."""
    if not graphs:
        raise ValueError("empty evaluation dataset")
    m = _score(model, graphs)
    run = {"auc": 100.0 * m["auc"], "acc": 100.0 * m["acc"], "n": len(graphs)}
    return EvalReport.from_runs([run], config_hash=model.config.config_hash(), label=label,
                                param_count=model.num_parameters())


def cross_validate(graphs: Sequence[HierarchicalGraph], config: ModelConfig, label: str = "",
                   keep: str = "last", progress: Callable[[str], None] | None = None) -> EvalReport:
    """``repeats`` initialisations x ``folds`` stratified folds; one run per pair.

    The fold split is fixed by ``config.seed``; repeat r re-initialises every
    fold's model with seed ``config.seed + r``.
    """
    labels = [g.label for g in graphs]
    folds = kfold_split(labels, config.folds, config.seed)
    runs, curves, n_params = [], [], 0
    for r in range(config.repeats):
        for f, (tr, va) in enumerate(folds):
            tr_g = [graphs[i] for i in tr]
            va_g = [graphs[i] for i in va]
            model, hist = train(tr_g, config, val_graphs=va_g if keep == "best_val" else None,
                                seed=config.seed + r, keep=keep)
            m = _score(model, va_g)
            runs.append({"repeat": r, "fold": f, "seed": config.seed + r, "n": len(va_g),
                         "auc": 100.0 * m["auc"], "acc": 100.0 * m["acc"]})
            curves.append(hist.step_loss)
            n_params = model.num_parameters()
            if progress is not None:
                progress(f"{label or 'run'} repeat {r} fold {f}: AUC {runs[-1]['auc']:.2f} "
                         f"ACC {runs[-1]['acc']:.2f}")
    return EvalReport.from_runs(runs, config_hash=config.config_hash(), label=label,
                                param_count=n_params, loss_curves=curves)


ABLATIONS = {
    "ssa": ("Ours w/o SSA", {"use_ssa": False}),
    "bi": ("Ours w/o BI", {"use_bi": False}),
    "fusion": ("Ours w/o Fusion", {"use_fusion": False}),
    "raconv": ("RAConv + HIViT", {"use_raconv_plus": False}),
}


def run_ablation(graphs: Sequence[HierarchicalGraph], config: ModelConfig,
                 ablations: Sequence[str] = ("ssa", "bi", "fusion"), seeds: Sequence[int] = (0,),
                 progress: Callable[[str], None] | None = None) -> dict[str, EvalReport]:
    """Full model plus single-switch ablations on identical folds and seeds.

    Runs from all ``seeds`` are pooled into one report per variant.
    """
    variants = [(name, *ABLATIONS[name]) for name in ablations] + [("full", "Ours", {})]
    reports = {}
    for key, label, change in variants:
        runs, curves = [], []
        for s in seeds:
            rep = cross_validate(graphs, config.replace(seed=s, **change), label=label,
                                 progress=progress)
            runs.extend(rep.runs)
            curves.extend(rep.loss_curves)
        reports[key] = EvalReport.from_runs(runs, config_hash=config.replace(**change).config_hash(),
                                            label=label, param_count=rep.param_count,
                                            loss_curves=curves)
    return reports


def ablation_table(reports: dict[str, EvalReport]) -> str:
    lines = ["| Method | AUC | ACC |", "|---|---|---|"]
    for key in [k for k in reports if k != "full"] + (["full"] if "full" in reports else []):
        r = reports[key]
        lines.append(f"| {r.label} | {format_metric(r.auc_mean, r.auc_std)} | "
                     f"{format_metric(r.acc_mean, r.acc_std)} |")
    return "\n".join(lines)
