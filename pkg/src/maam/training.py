"""Optimisation loop, classification metrics and experiment logs."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Dataset, make_batches, seeded_subset
from .errors import ConfigurationError, GradientError
from .model import ABLATION_VARIANTS, BASELINE_VARIANTS, DISPLAY_NAMES, Model, ModelSpec, build_model, save_checkpoint
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("Model", "Accuracy", "F1 Score", "Precision", "Recall")

# rng stream for parameter initialisation (data streams live in data.py)
_INIT_STREAM = 0


@dataclass
class TrainConfig:
    epochs: int = 1
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    variant: str = "maam"
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    augment: bool = True
    shuffle: bool = True
    workers: int = 0
    max_steps: Optional[int] = None
    evaluate_each_epoch: bool = True
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigurationError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.subset is not None and self.subset < 1:
            raise ConfigurationError(f"subset must be >= 1, got {self.subset}")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(variant=self.variant, **self.model)


@dataclass
class MetricsReport:
    """Confusion matrix (rows = true class, columns = predicted) and macro metrics."""

    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @classmethod
    def from_confusion(cls, confusion) -> "MetricsReport":
        """Macro-averaged metrics; a per-class 0/0 ratio counts as 0."""
        cm = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        predicted = cm.sum(axis=0).astype(np.float64)
        actual = cm.sum(axis=1).astype(np.float64)
        precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
        total = cm.sum()
        return cls(
            confusion=cm,
            accuracy=float(tp.sum() / total) if total else 0.0,
            macro_precision=float(precision.mean()),
            macro_recall=float(recall.mean()),
            macro_f1=float(f1.mean()),
        )

    def row(self) -> list[float]:
        """Values in table column order: accuracy, F1, precision, recall."""
        return [self.accuracy, self.macro_f1, self.macro_precision, self.macro_recall]

    def summary(self) -> str:
        return (
            f"accuracy={self.accuracy:.4f} f1={self.macro_f1:.4f} "
            f"precision={self.macro_precision:.4f} recall={self.macro_recall:.4f}"
        )


@dataclass
class RunLog:
    step_losses: list[float] = field(default_factory=list)
    step_epochs: list[int] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_metrics: list[Optional[MetricsReport]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    fusion_weights: list[Optional[np.ndarray]] = field(default_factory=list)
    batch_checksums: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.step_losses)

    @property
    def final_metrics(self) -> Optional[MetricsReport]:
        return self.epoch_metrics[-1] if self.epoch_metrics else None

    def write(self, out_dir) -> None:
        """loss.csv, epochs.csv and timing.csv under ``out_dir``.

        Wall-clock times go to timing.csv only, so the other two files are
        byte-identical across reruns with the same configuration.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, loss in enumerate(self.step_losses):
                w.writerow([i, repr(float(loss))])
        with open(out / "epochs.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "accuracy", "macro_p", "macro_r", "macro_f1", "w1", "w2", "w3"])
            for e, mean_loss in enumerate(self.epoch_losses):
                m = self.epoch_metrics[e]
                metrics = [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1] if m else ["", "", "", ""]
                fw = self.fusion_weights[e]
                weights = [repr(float(v)) for v in fw] if fw is not None else ["", "", ""]
                w.writerow([e, repr(float(mean_loss)), *[v if v == "" else repr(float(v)) for v in metrics], *weights])
        with open(out / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for e, s in enumerate(self.epoch_seconds):
                w.writerow([e, f"{s:.3f}"])


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float, weight_decay: float, state: dict) -> None:
    """In-place SGD with momentum and L2 weight decay.

    ``v = momentum * v + grad + weight_decay * param``; ``param -= lr * v``.
    ``state`` holds the velocity buffers keyed by parameter name.
    """
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"parameter {name} has no gradient")
        d = p.grad + DTYPE(weight_decay) * p.data if weight_decay else p.grad
        v = state.get(name)
        v = d.astype(DTYPE, copy=True) if v is None else DTYPE(momentum) * v + d
        state[name] = v
        p.data -= DTYPE(lr) * v


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, classes: int = 10) -> np.ndarray:
    return np.bincount(labels * classes + predictions, minlength=classes * classes).reshape(classes, classes)


def evaluate(model: Model, batches: Iterable[Batch]) -> MetricsReport:
    classes = model.spec.classes
    cm = np.zeros((classes, classes), dtype=np.int64)
    for batch in batches:
        cm += confusion_matrix(batch.y, model.predict(Tensor(batch.x)), classes)
    return MetricsReport.from_confusion(cm)


def eval_batches(ds: Dataset, batch: int) -> Iterable[Batch]:
    return make_batches(ds, batch, shuffle=False, augment_images=False)


def train_step(model: Model, batch: Batch, config: TrainConfig, state: dict) -> float:
    model.zero_grad()
    tape = T.Tape()
    logits = model.forward(Tensor(batch.x), train=True, tape=tape)
    with tape:
        loss = T.cross_entropy(logits, batch.y)
    tape.backward(loss)
    sgd_step(dict(model.named_parameters()), config.lr, config.momentum, config.weight_decay, state)
    return loss.item()


def train(
    config: TrainConfig,
    train_ds: Dataset,
    test_ds: Optional[Dataset] = None,
    out_dir=None,
) -> tuple[Model, RunLog]:
    """Train one model; fully deterministic for a given config and data.

    With ``out_dir`` the run log is written there, along with ``last.bin``
    after every epoch and ``best.bin`` whenever test accuracy improves.
    """
    model = build_model(config.model_spec(), T.make_rng(config.seed, _INIT_STREAM))
    train_ds = seeded_subset(train_ds, config.subset, config.seed)
    if test_ds is not None and config.test_subset is not None:
        test_ds = test_ds.take(slice(0, config.test_subset))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog()
    state: dict = {}
    best = -1.0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        losses = []
        for batch in make_batches(train_ds, config.batch, config.shuffle, config.augment, config.seed, epoch, config.workers):
            runlog.batch_checksums.append(batch.checksum())
            losses.append(train_step(model, batch, config, state))
            runlog.step_losses.append(losses[-1])
            runlog.step_epochs.append(epoch)
            if config.max_steps is not None and len(runlog) >= config.max_steps:
                break
        runlog.epoch_losses.append(float(np.mean(losses)))
        metrics = None
        if test_ds is not None and config.evaluate_each_epoch:
            metrics = evaluate(model, eval_batches(test_ds, config.batch))
        runlog.epoch_metrics.append(metrics)
        runlog.fusion_weights.append(_fusion_weights_or_none(model))
        runlog.epoch_seconds.append(time.perf_counter() - start)
        log.info(
            "%s epoch %d: loss %.4f%s (%.1fs)",
            config.variant, epoch, runlog.epoch_losses[-1],
            f", {metrics.summary()}" if metrics else "", runlog.epoch_seconds[-1],
        )
        if out is not None:
            save_checkpoint(model, out / "last.bin")
            if metrics is not None and metrics.accuracy > best:
                best = metrics.accuracy
                save_checkpoint(model, out / "best.bin")
        if config.max_steps is not None and len(runlog) >= config.max_steps:
            break
    if out is not None:
        runlog.write(out)
    return model, runlog


def _fusion_weights_or_none(model: Model) -> Optional[np.ndarray]:
    try:
        return model.fusion_weights()
    except ConfigurationError:
        return None


@dataclass
class VariantResult:
    variant: str
    metrics: MetricsReport
    runlog: RunLog
    param_count: int

    @property
    def name(self) -> str:
        return DISPLAY_NAMES[self.variant]


def run_variants(
    base: TrainConfig,
    variants: Sequence[str],
    train_ds: Dataset,
    test_ds: Dataset,
    out_dir=None,
) -> list[VariantResult]:
    """Train each variant under the same seed and configuration."""
    results = []
    for variant in variants:
        config = replace(base, variant=variant, evaluate_each_epoch=True)
        sub = Path(out_dir) / variant if out_dir is not None else None
        model, runlog = train(config, train_ds, test_ds, sub)
        metrics = runlog.final_metrics or evaluate(model, eval_batches(test_ds, config.batch))
        results.append(VariantResult(variant, metrics, runlog, model.param_count()))
    return results


def run_ablation_suite(base: TrainConfig, train_ds: Dataset, test_ds: Dataset, out_dir=None) -> list[VariantResult]:
    """MAAM and its three ablation variants."""
    return run_variants(base, ABLATION_VARIANTS, train_ds, test_ds, out_dir)


def run_baseline_comparison(base: TrainConfig, train_ds: Dataset, test_ds: Dataset, out_dir=None, variants=BASELINE_VARIANTS) -> list[VariantResult]:
    """MAAM against the CNN, MLP and RNN baselines."""
    return run_variants(base, variants, train_ds, test_ds, out_dir)


def write_table_csv(results: Sequence[VariantResult], path) -> str:
    """Comparison table: Model, Accuracy, F1 Score, Precision, Recall."""
    rows = [TABLE_COLUMNS] + [(r.name, *(f"{v:.4f}" for v in r.metrics.row())) for r in results]
    text = "".join(",".join(row) + "\n" for row in rows)
    if path is not None:
        Path(path).write_text(text)
    return text
