"""SGD training, evaluation metrics and k-fold cross-validation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .architecture import ArchitectureConfig
from .data import ImageSet, stratified_kfold
from .errors import ConfigError, DimensionError, NumericError
from .model import Model, build
from .tensor import GradientTape, Tensor, backward, result

log = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = (".bias", ".gamma", ".beta")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (train-mode batch norm needs statistics)")


def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             velocity: dict[str, np.ndarray], config: SgdConfig,
             decay_filter: Callable[[str], bool] = decays):
    """One momentum-SGD update, in place.

    ``g' = g + wd * w`` (only where ``decay_filter(name)``),
    ``v = momentum * v + g'``, ``w -= lr * v``.
    """
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w = p.data
        if wd and decay_filter(name):
            g = g + w.dtype.type(wd) * w
        v = velocity.get(name)
        v = g.astype(w.dtype, copy=True) if v is None else v * w.dtype.type(mu) + g
        velocity[name] = v
        w -= w.dtype.type(lr) * v
    return params, velocity


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return result(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


# -- metrics -----------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # rows: true class, cols: predicted class
    loss: float | None = None

    def per_class_f1(self) -> np.ndarray:
        return f1_scores(self.confusion)


def confusion_matrix(labels, preds, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def f1_scores(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def classification_metrics(labels, preds, k: int, loss: float | None = None) -> Metrics:
    cm = confusion_matrix(labels, preds, k)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    return Metrics(acc, float(f1_scores(cm).mean()), cm, loss)


def _batches(n: int, batch_size: int, order: np.ndarray | None = None) -> list[np.ndarray]:
    idx = np.arange(n) if order is None else order
    chunks = [idx[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch of one cannot be batch-normalized; fold it into the previous one
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def evaluate(model: Model, data: ImageSet, batch_size: int = 32) -> Metrics:
    """Eval-mode accuracy, macro-F1 and confusion; argmax ties go to the lowest index."""
    was = model.training
    model.eval()
    preds, losses = [], []
    try:
        for idx in _batches(len(data), batch_size):
            logits = model.forward(Tensor(data.inputs(idx)))
            preds.append(np.argmax(logits.data, axis=1))
            losses.append(cross_entropy_loss(logits, data.labels[idx]).item() * len(idx))
    finally:
        model.set_training(was)
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    loss = float(np.sum(losses) / len(data)) if len(data) else None
    return classification_metrics(data.labels, pred, model.num_classes, loss)


# -- training ----------------------------------------------------------------

@dataclass
class TrainState:
    velocity: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    losses: list = field(default_factory=list)
    step: int = 0


def train_step(model: Model, x: np.ndarray, y: np.ndarray, config: SgdConfig, state: TrainState) -> float:
    model.train()
    tape = GradientTape()
    logits = model.forward(Tensor(x.astype(model.dtype, copy=False)), tape)
    loss = cross_entropy_loss(logits, y)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {state.step}")
    backward(tape, loss)
    params = model.parameters()
    grads = {name: tape.gradient(p) for name, p in params.items()}
    sgd_step(params, {k: g for k, g in grads.items() if g is not None}, state.velocity, config)
    state.step += 1
    return value


def train_epoch(model: Model, data: ImageSet, config: SgdConfig, state: TrainState, epoch: int = 0) -> float:
    """One shuffled pass over ``data``; returns the sample-weighted mean loss."""
    order = state.rng.permutation(len(data))
    total = 0.0
    for b, idx in enumerate(_batches(len(data), config.batch_size, order)):
        try:
            value = train_step(model, data.inputs(idx), data.labels[idx], config, state)
        except NumericError as exc:
            trace = ", ".join(f"{v:.4g}" for v in state.losses[-10:])
            raise NumericError(f"epoch {epoch}, batch {b}: {exc}; recent epoch losses [{trace}]") from None
        total += value * len(idx)
    mean = total / len(data)
    state.losses.append(mean)
    return mean


@dataclass
class FoldReport:
    fold: int
    accuracy: float
    macro_f1: float
    confusion: np.ndarray
    epoch_losses: list
    seed: int
    wall_time: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        if not isinstance(other, FoldReport):
            return NotImplemented
        return (self.fold == other.fold and self.accuracy == other.accuracy
                and self.macro_f1 == other.macro_f1 and self.seed == other.seed
                and np.array_equal(self.confusion, other.confusion)
                and self.epoch_losses == other.epoch_losses)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def train_fold(model: Model, train: ImageSet, test: ImageSet, config: SgdConfig, fold: int = 0,
               on_epoch: Callable[[int, float], None] | None = None) -> FoldReport:
    """Fit ``model`` on ``train`` for ``config.epochs`` epochs and score ``test``."""
    start = time.perf_counter()
    state = TrainState(rng=np.random.default_rng(config.seed))
    model.seed_dropout(np.random.SeedSequence(config.seed).spawn(2)[1])
    for epoch in range(config.epochs):
        loss = train_epoch(model, train, config, state, epoch)
        log.info("fold %d epoch %d loss %.4f", fold, epoch + 1, loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    model.eval()
    m = evaluate(model, test)
    return FoldReport(fold, m.accuracy, m.macro_f1, m.confusion, list(state.losses), config.seed,
                      time.perf_counter() - start)


@dataclass
class CVResult:
    reports: list[FoldReport]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.reports])

    @property
    def f1s(self) -> np.ndarray:
        return np.array([r.macro_f1 for r in self.reports])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        """Population standard deviation over folds."""
        return float(self.accuracies.std())

    @property
    def mean_f1(self) -> float:
        return float(self.f1s.mean())

    @property
    def std_f1(self) -> float:
        return float(self.f1s.std())

    def summary(self) -> dict:
        return {
            "folds": len(self.reports),
            "accuracy_mean": self.mean_accuracy, "accuracy_std": self.std_accuracy,
            "macro_f1_mean": self.mean_f1, "macro_f1_std": self.std_f1,
            "accuracy_pm": f"{100 * self.mean_accuracy:.2f}±{100 * self.std_accuracy:.2f}",
        }


def fold_seeds(master_seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(k)]


def run_cv(arch: ArchitectureConfig, data: ImageSet, config: SgdConfig, k: int = 5,
           folds: Sequence[int] | None = None, init_weights: str | None = None,
           on_fold: Callable[[FoldReport, Model], None] | None = None) -> CVResult:
    """Stratified k-fold CV; each fold trains a fresh model from a derived seed."""
    from .weights import load_weights

    split = stratified_kfold(data.labels, k, config.seed)
    seeds = fold_seeds(config.seed, k)
    reports = []
    for f in (range(k) if folds is None else folds):
        test_idx = np.flatnonzero(split.assignments == f)
        train_idx = np.flatnonzero(split.assignments != f)
        model = build(arch, seeds[f])
        if init_weights is not None:
            load_weights(model, init_weights, reinit_head=True, seed=seeds[f])
        fold_cfg = SgdConfig(**{**asdict(config), "seed": seeds[f]})
        report = train_fold(model, data.subset(train_idx), data.subset(test_idx), fold_cfg, fold=f)
        reports.append(report)
        if on_fold is not None:
            on_fold(report, model)
    return CVResult(reports)


def write_reports(result: CVResult, out_dir: str | Path, classes: Sequence[str]) -> dict[str, Path]:
    """Write ``summary.json`` plus one ``confusion_fold<i>.csv`` per fold."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    summary = result.summary()
    summary["classes"] = list(classes)
    summary["reports"] = [r.to_dict() for r in result.reports]
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2))
    for r in result.reports:
        p = out / f"confusion_fold{r.fold}.csv"
        lines = ["true\\pred," + ",".join(classes)]
        lines += [classes[i] + "," + ",".join(str(v) for v in row) for i, row in enumerate(r.confusion)]
        p.write_text("\n".join(lines) + "\n")
        paths[f"confusion_fold{r.fold}"] = p
    return paths
