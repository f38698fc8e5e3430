"""Loss, metrics, the mini-batch trainer, cross-validation and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, stratified_kfold
from .errors import CheckpointError, TrainingError, ValidationError
from .model import (Hyper, ModelParams, _eval_outputs, build_forward, cross_entropy_var,
                    init_params, param_shapes, predict_proba, prepare_inputs)
from .numerics import AdamState, DiffGraph, adam_step, reverse_grad

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class UndefinedMetricWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 5e-5
    max_epochs: int = 600
    early_stop_patience: int = 100
    min_delta: float = 1e-6
    batch_size: int = 16
    seed: int = 0
    hidden_dim: int = 16
    bgc_dim: int | None = None
    n_layers: int = 2
    dropout_rate: float = 0.5
    readout_mode: str = "both"
    pooling: str = "flatten"
    mlp_hidden: tuple[int, int] = (256, 64)
    activation: str = "leaky_relu"
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-6
    exp_clamp: float = 30.0
    stratified: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(w) for w in self.mlp_hidden))
        problems = []
        if self.lr < 0 or self.weight_decay < 0:
            problems.append("lr and weight_decay must be >= 0")
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.batch_size < 1:
            problems.append("max_epochs, early_stop_patience, batch_size must be >= 1")
        if self.early_stop_patience > self.max_epochs:
            problems.append("early_stop_patience must not exceed max_epochs")
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def hyper(self, n_regions: int) -> Hyper:
        return Hyper(
            n_regions=n_regions, hidden_dim=self.hidden_dim, bgc_dim=self.bgc_dim,
            n_layers=self.n_layers,
            dropout_rate=self.dropout_rate, readout_mode=self.readout_mode,
            pooling=self.pooling, mlp_hidden=self.mlp_hidden, activation=self.activation,
            sinkhorn_max_iters=self.sinkhorn_max_iters, sinkhorn_tol=self.sinkhorn_tol,
            exp_clamp=self.exp_clamp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# loss and metrics
# --------------------------------------------------------------------------

def cross_entropy(probs, label) -> float:
    """``-ln(max(p[label], 1e-12))`` for one 2-vector, or the batch mean."""
    p = np.asarray(probs, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    p2 = np.atleast_2d(p)
    if p2.shape[-1] != 2 or len(p2) != len(labels):
        raise ValueError(f"probabilities {p.shape} do not match labels {labels.shape}")
    if np.any(np.abs(p2.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must sum to 1")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError(f"labels must be 0 or 1, got {labels.tolist()}")
    picked = p2[np.arange(len(labels)), labels.astype(int)]
    return float(np.mean(-np.log(np.maximum(picked, 1e-12))))


@dataclass
class BinaryMetrics:
    accuracy: float
    precision: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int


def auc_score(labels, scores) -> float:
    """Mann-Whitney AUC with midranks for ties; 0.5 if a class is absent."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined with a single class; returning 0.5",
                      UndefinedMetricWarning, stacklevel=2)
        return 0.5
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_metrics(labels, predictions, scores) -> BinaryMetrics:
    """Accuracy, precision (positive class = 1) and AUC.

    Precision is 0, with a warning, when nothing is predicted positive.
    """
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if not len(labels) == len(predictions) == len(scores) or len(labels) == 0:
        raise ValueError(
            f"length mismatch: {len(labels)} labels, {len(predictions)} predictions, "
            f"{len(scores)} scores")
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    if tp + fp == 0:
        warnings.warn("no positive predictions; precision set to 0",
                      UndefinedMetricWarning, stacklevel=2)
        precision = 0.0
    else:
        precision = tp / (tp + fp)
    return BinaryMetrics((tp + tn) / len(labels), precision,
                         auc_score(labels, scores), tp, fp, tn, fn)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf

    @property
    def epochs_run(self) -> int:
        return len(self.losses)


def train(train_set: Dataset, cfg: TrainConfig, params: ModelParams | None = None
          ) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch Adam on the cross-entropy; returns best-epoch parameters.

    The tracked epoch loss is the dropout-free (eval mode) cross-entropy over
    the whole training set after the epoch's updates; an epoch improves on
    the best when that loss drops by at least ``cfg.min_delta``. Training
    stops after ``cfg.early_stop_patience`` epochs without improvement or at
    ``cfg.max_epochs``.
    """
    if len(train_set) == 0:
        raise ValidationError("training set is empty")
    labels = train_set.labels
    if len(np.unique(labels)) < 2:
        raise ValidationError("training set contains a single class")
    hyper = cfg.hyper(train_set.n_regions)
    if params is None:
        params = init_params(hyper, cfg.seed)
    xf, xs = prepare_inputs(train_set.functional(), train_set.structural(), hyper)
    rng = np.random.default_rng(cfg.seed)
    weights = dict(params.weights)
    state = AdamState.init(weights, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = TrainHistory()
    best = {k: v.copy() for k, v in weights.items()}
    n = len(labels)
    rows = np.arange(n)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            g = DiffGraph()
            w = {k: g.leaf(v, name=k) for k, v in weights.items()}
            t = build_forward(g, xf[idx], xs[idx], w, hyper, train=True, rng=rng)
            loss = cross_entropy_var(g, t["probs"], labels[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = reverse_grad(g, loss)
            weights, state = adam_step(state, weights, grads)
        probs = _eval_outputs(ModelParams(hyper, weights), xf, xs, "probs", n)
        epoch_loss = float(np.mean(-np.log(np.maximum(probs[rows, labels], 1e-12))))
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        history.losses.append(epoch_loss)
        if epoch_loss < history.best_loss - cfg.min_delta:
            history.best_loss = epoch_loss
            history.best_epoch = epoch
            best = weights  # adam_step never mutates, no copy needed
        elif epoch - history.best_epoch >= cfg.early_stop_patience:
            break
    log.debug("trained %d epochs, best %.6g at epoch %d",
              history.epochs_run, history.best_loss, history.best_epoch)
    return ModelParams(hyper, best), history


def predict(params: ModelParams, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(predicted labels, patient-class scores)``."""
    probs = predict_proba(params, dataset.functional(), dataset.structural())
    return (probs[:, 1] > probs[:, 0]).astype(int), probs[:, 1]


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

@dataclass
class FoldReport:
    fold: int
    accuracy: float
    precision: float
    auc: float
    epochs_run: int
    best_loss: float
    tp: int
    fp: int
    tn: int
    fn: int
    test_ids: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


METRICS = ("accuracy", "precision", "auc")


@dataclass
class CvReport:
    """Per-fold results with mean and (population) standard deviation."""

    folds: list[FoldReport]
    n_layers: int
    readout_mode: str
    seed: int

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(f, metric) for f in self.folds]))

    def std(self, metric: str) -> float:
        return float(np.std([getattr(f, metric) for f in self.folds]))

    def summary(self) -> dict:
        return {m: {"mean": self.mean(m), "std": self.std(m)} for m in METRICS}

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "readout_mode": self.readout_mode,
                "seed": self.seed, "k": len(self.folds), "summary": self.summary(),
                "folds": [asdict(f) for f in self.folds]}


def run_fold(dataset: Dataset, cfg: TrainConfig, fold: int,
             train_idx, test_idx) -> tuple[FoldReport, ModelParams]:
    fold_cfg = replace(cfg, seed=cfg.seed ^ fold)
    params, hist = train(dataset.subset(train_idx), fold_cfg)
    test = dataset.subset(test_idx)
    pred, scores = predict(params, test)
    m = binary_metrics(test.labels, pred, scores)
    report = FoldReport(fold, m.accuracy, m.precision, m.auc, hist.epochs_run,
                        hist.best_loss, m.tp, m.fp, m.tn, m.fn,
                        test.subject_ids, [float(s) for s in scores])
    return report, params


def cross_validate(dataset: Dataset, cfg: TrainConfig, k: int = 10,
                   threads: int = 1) -> CvReport:
    """k-fold cross-validation; fold ``i`` initialises and shuffles with seed ``seed ^ i``."""
    dataset.require_both_labels()
    folds = stratified_kfold(dataset.labels, k, cfg.seed, stratified=cfg.stratified)

    def job(i):
        tr, te = folds[i]
        report, _ = run_fold(dataset, cfg, i, tr, te)
        log.info("fold %d: acc %.3f auc %.3f (%d epochs)",
                 i, report.accuracy, report.auc, report.epochs_run)
        return report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(job, range(k)))
    else:
        reports = [job(i) for i in range(k)]
    return CvReport(reports, cfg.n_layers, cfg.readout_mode, cfg.seed)


def sweep_layers(dataset: Dataset, cfg: TrainConfig, layers: Sequence[int] = (1, 2, 3, 4),
                 k: int = 10, threads: int = 1) -> dict[int, CvReport]:
    """One cross-validation per graph-convolution depth."""
    return {L: cross_validate(dataset, replace(cfg, n_layers=L), k, threads) for L in layers}


def write_cv_json(report: CvReport | dict[int, CvReport], path) -> None:
    if isinstance(report, CvReport):
        doc = report.to_dict()
    else:
        doc = {"sweep": [r.to_dict() for _, r in sorted(report.items())]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cv_table(reports: Sequence[CvReport]) -> str:
    """CSV text with one row per report: Acc, Prec and AUC as ``mean±std`` in %."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "n_layers", "readout", "Acc", "Prec", "AUC"])
    for r in reports:
        cells = [f"{100 * r.mean(m):.1f}±{100 * r.std(m):.1f}" for m in METRICS]
        w.writerow(["MDGCN", r.n_layers, r.readout_mode, *cells])
    return buf.getvalue()


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    hyper: Hyper
    weights: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    epoch: int = 0
    rng_state_label: str = ""
    normalization: dict = field(default_factory=lambda: {"structural": "per_sample_max"})
    evaluation: dict | None = None
    format_version: int = CHECKPOINT_VERSION

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.hyper, dict(self.weights))


def _tensor_json(a: np.ndarray) -> str:
    data = ",".join(format(float(v), ".17g") for v in np.asarray(a, dtype=np.float64).ravel())
    return f'{{"shape": {json.dumps(list(a.shape))}, "data": [{data}]}}'


def save_checkpoint(path, cp: Checkpoint) -> None:
    """Versioned JSON; tensor entries are written with 17 significant digits."""
    for name, a in cp.weights.items():
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name} has non-finite entries")
    meta = {
        "format_version": cp.format_version,
        "hyper": cp.hyper.to_dict(),
        "train_config": cp.train_config,
        "epoch": cp.epoch,
        "rng_state_label": cp.rng_state_label,
        "normalization": cp.normalization,
        "evaluation": cp.evaluation,
    }
    head = json.dumps(meta, indent=1, sort_keys=True)[:-2]
    body = ",\n".join(f" {json.dumps(k)}: {_tensor_json(v)}"
                      for k, v in sorted(cp.weights.items()))
    Path(path).write_text(head + ',\n "params": {\n' + body + "\n }\n}\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"malformed checkpoint {path}: {exc.msg} at line {exc.lineno} "
            f"column {exc.colno}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("malformed checkpoint: top level is not an object")
    for key in ("format_version", "hyper", "params"):
        if key not in doc:
            raise CheckpointError(f"malformed checkpoint: missing field {key!r}")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {doc['format_version']!r} "
            f"(expected {CHECKPOINT_VERSION})")
    try:
        hyper = Hyper(**doc["hyper"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint field 'hyper': {exc}") from None
    expected = param_shapes(hyper)
    weights = {}
    for name, shape in expected.items():
        entry = doc["params"].get(name)
        if entry is None:
            raise CheckpointError(f"malformed checkpoint: missing tensor {name!r}")
        try:
            arr = np.array(entry["data"], dtype=np.float64)
            arr = arr.reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint tensor {name!r}: {exc}") from None
        if arr.shape != tuple(shape):
            raise CheckpointError(
                f"malformed checkpoint tensor {name!r}: shape {arr.shape}, expected {shape}")
        weights[name] = arr
    extra = set(doc["params"]) - set(expected)
    if extra:
        raise CheckpointError(f"malformed checkpoint: unexpected tensor {sorted(extra)[0]!r}")
    return Checkpoint(hyper, weights, doc.get("train_config") or {}, int(doc.get("epoch", 0)),
                      doc.get("rng_state_label", ""), doc.get("normalization") or {},
                      doc.get("evaluation"), doc["format_version"])
