"""SGD training loop with the learning-rate halving schedule, max-norm
projection after every step, dropout orchestration, and frame-level
recognition scoring.

Schedule rule: after each epoch the monitored recognition score is
compared to the IMMEDIATELY previous epoch's; a regression halves the
learning rate, and the fifth halving stops training. The halving count
never resets.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from tfcmnn.constraints import project_rows
from tfcmnn.data import FrameDataset, batch_iterator
from tfcmnn.errors import DivergenceError, DomainError
from tfcmnn.model import Model, forward, loss_and_grads, named_params
from tfcmnn.numerics import SeededRng

MAX_HALVINGS = 5


@dataclass
class TrainConfig:
    lr0: float = 0.1
    batch_size: int = 100
    max_norm: float | None = 0.8
    max_epochs: int = 100
    seed: int = 42
    monitor: str = "dev"   # 'eval' reproduces the original protocol but leaks the test set

    def __post_init__(self):
        if self.lr0 < 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise DomainError("lr0, batch_size, max_epochs must be non-negative/positive")
        if self.max_norm is not None and self.max_norm <= 0:
            raise DomainError(f"max_norm must be positive, got {self.max_norm}")
        if self.monitor not in ("dev", "eval"):
            raise DomainError(f"monitor must be 'dev' or 'eval', got {self.monitor!r}")


@dataclass
class LRSchedule:
    lr0: float
    current_lr: float = 0.0
    halvings_used: int = 0
    prev_score: float | None = None

    def __post_init__(self):
        self.current_lr = self.lr0

    def update(self, epoch_score: float):
        """Apply the previous-epoch comparison rule; returns stop flag."""
        if not 0.0 <= epoch_score <= 1.0:
            raise DomainError(f"score {epoch_score} outside [0, 1]")
        if self.prev_score is not None and epoch_score < self.prev_score:
            self.halvings_used += 1
            self.current_lr = self.lr0 / (2 ** self.halvings_used)
        self.prev_score = epoch_score
        return self.halvings_used >= MAX_HALVINGS


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_score: float
    eval_score: float
    seconds: float


@dataclass
class TrainingReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_dev_score: float = 0.0
    initial_eval_score: float = 0.0
    stopped_by_schedule: bool = False
    halvings: int = 0

    @property
    def final_dev_score(self) -> float:
        return self.epochs[-1].dev_score if self.epochs else self.initial_dev_score

    @property
    def final_eval_score(self) -> float:
        return self.epochs[-1].eval_score if self.epochs else self.initial_eval_score

    @property
    def total_seconds(self) -> float:
        return sum(e.seconds for e in self.epochs)


def _param_row_axes(name: str, arr: np.ndarray):
    """Axes of one unit's incoming weight vector, per parameter kind.

    conv (n_lin, K, span): kernel axes 1,2; dense (d, m, k): input axis 0;
    head (features, classes): feature axis 0. Biases are unconstrained.
    """
    if name.endswith(".b"):
        return None
    if ".conv" in name:
        return (1, 2)
    return (0,)


def apply_max_norm(model: Model, c: float) -> None:
    """Project every constrained weight row onto the radius-c ball."""
    for name, arr in named_params(model):
        axes = _param_row_axes(name, arr)
        if axes is not None:
            project_rows(arr, c, axes)


def sgd_step(model: Model, patches: np.ndarray, labels, lr: float,
             rng: SeededRng | None, max_norm: float | None) -> float:
    """One mini-batch step: mean-of-batch gradient, w -= lr * g, then the
    max-norm projection. Returns the mean batch loss."""
    if len(patches) == 0:
        raise DomainError("empty batch")
    losses, grads = loss_and_grads(model, patches, labels, mode="train", rng=rng)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise DivergenceError(f"non-finite loss at batch index {bad[0]}")
    for name, arr in named_params(model):
        arr -= lr * grads[name]
    if max_norm is not None:
        apply_max_norm(model, max_norm)
    return float(losses.mean())


def recognition_score(predictions, labels) -> float:
    """Fraction of frames whose predicted class equals the label."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise DomainError("predictions/labels must be equal-length and non-empty")
    return float(np.mean(predictions == labels))


def evaluate(model: Model, dataset: FrameDataset, batch_size: int = 512) -> float:
    """Frame recognition score over a dataset, test-mode forward (dropout
    folded into the weights)."""
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    preds = np.empty(len(dataset), dtype=np.int64)
    for lo in range(0, len(dataset), batch_size):
        probs, _ = forward(model, dataset.patches[lo:lo + batch_size], mode="test")
        preds[lo:lo + len(probs)] = np.argmax(probs, axis=1)
    return recognition_score(preds, dataset.labels)


def train(config: TrainConfig, model: Model, train_set: FrameDataset,
          dev_set: FrameDataset, eval_set: FrameDataset,
          epoch_callback=None) -> TrainingReport:
    """Full training run. Deterministic given config.seed: epoch shuffles
    and dropout masks all derive from it. Raises DivergenceError with the
    partial report attached (as .report) if a batch loss goes non-finite.
    """
    report = TrainingReport()
    report.initial_dev_score = evaluate(model, dev_set) if len(dev_set) else 0.0
    report.initial_eval_score = evaluate(model, eval_set) if len(eval_set) else 0.0
    sched = LRSchedule(config.lr0)
    dropout_rng = SeededRng([config.seed, 404])
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.current_lr
        losses = []
        try:
            for idx in batch_iterator(len(train_set), config.batch_size, config.seed, epoch):
                losses.append(sgd_step(model, train_set.patches[idx], train_set.labels[idx],
                                       lr, dropout_rng, config.max_norm))
        except DivergenceError as exc:
            exc.report = report
            raise
        dev_score = evaluate(model, dev_set) if len(dev_set) else 0.0
        eval_score = evaluate(model, eval_set) if len(eval_set) else 0.0
        seconds = time.perf_counter() - t0
        report.epochs.append(EpochRecord(epoch, lr, float(np.mean(losses)),
                                         dev_score, eval_score, seconds))
        if epoch_callback is not None:
            epoch_callback(report.epochs[-1])
        monitored = dev_score if config.monitor == "dev" else eval_score
        stop = sched.update(monitored)
        report.halvings = sched.halvings_used
        if stop:
            report.stopped_by_schedule = True
            break
    return report


# ---------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report_csv(report: TrainingReport, path: str, include_timing: bool = True) -> None:
    """`epoch,lr,train_loss,dev_score,eval_score,seconds` per epoch.

    include_timing=False writes 0.0 seconds so reruns are byte-identical
    (wall time is the only nondeterministic field).
    """
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "dev_score", "eval_score", "seconds"])
        for e in report.epochs:
            w.writerow([e.epoch, _fmt(e.lr), _fmt(e.train_loss), _fmt(e.dev_score),
                        _fmt(e.eval_score), _fmt(e.seconds if include_timing else 0.0)])
    os.replace(tmp, path)


def write_report_json(report: TrainingReport, path: str, extra: dict | None = None,
                      include_timing: bool = True) -> None:
    summary = {
        "epochs": len(report.epochs),
        "total_hours": (report.total_seconds / 3600.0) if include_timing else 0.0,
        "dev_score": report.final_dev_score,
        "eval_score": report.final_eval_score,
        "halvings": report.halvings,
        "stopped_by_schedule": report.stopped_by_schedule,
        "per_epoch": [asdict(e) | ({} if include_timing else {"seconds": 0.0})
                      for e in report.epochs],
    }
    if extra:
        summary.update(extra)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
