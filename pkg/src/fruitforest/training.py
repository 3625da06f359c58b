"""Loss, gradients, the optimizer update rule, schedules, and the train loop.

The optimizer keeps a running average of squared gradients and scales each
step by eta / sqrt(average + epsilon). The learning rate halves after a
patience window of non-improving validation loss, and training stops after
a longer window of non-improving validation accuracy, restoring the
parameters of the best epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .container import atomic_write_text
from .errors import EmptyDatasetError, LabelRangeError, ShapeMismatchError
from .rng import ROLE_DROPOUT, ROLE_SHUFFLE, derive_rng


@dataclass
class CrossEntropyBatch:
    """Logits [N, C] with integer targets [N] in [0, C)."""

    logits: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.targets = np.asarray(self.targets)
        if self.logits.ndim != 2 or self.logits.shape[0] < 1:
            raise ShapeMismatchError(f"logits must be [N, C] with N >= 1, got {self.logits.shape}")
        if self.targets.shape != (self.logits.shape[0],):
            raise ShapeMismatchError(
                f"targets shape {self.targets.shape} does not match batch size {self.logits.shape[0]}"
            )
        n_classes = self.logits.shape[1]
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= n_classes):
            raise LabelRangeError(f"targets must lie in [0, {n_classes})")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def cross_entropy_loss(batch: CrossEntropyBatch) -> float:
    """Batch mean of -log softmax(true class), evaluated in log space."""
    logits = batch.logits
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    picked = logits[np.arange(logits.shape[0]), batch.targets]
    return float(np.mean(lse - picked))


def cross_entropy_gradient(batch: CrossEntropyBatch) -> np.ndarray:
    """Gradient of cross_entropy_loss with respect to the logits."""
    grad = _softmax_rows(batch.logits)
    grad[np.arange(grad.shape[0]), batch.targets] -= grad.dtype.type(1)
    grad /= grad.dtype.type(grad.shape[0])
    return grad


@dataclass
class AdadeltaState:
    """Running average of squared gradients, one array per parameter."""

    accum: list[np.ndarray]
    gamma: float = 0.95
    eta: float = 0.1
    epsilon: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eta <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("eta and epsilon must be positive")

    @classmethod
    def for_params(cls, params, gamma: float = 0.95, eta: float = 0.1, epsilon: float = 1e-7):
        return cls(accum=[np.zeros_like(p) for p in params], gamma=gamma, eta=eta, epsilon=epsilon)


def adadelta_step(params, grads, state: AdadeltaState):
    """Apply one update in place; returns (params, state) for chaining."""
    if not (len(params) == len(grads) == len(state.accum)):
        raise ShapeMismatchError(
            f"got {len(params)} params, {len(grads)} grads, {len(state.accum)} accumulators"
        )
    for p, g, a in zip(params, grads, state.accum):
        if p.shape != g.shape or p.shape != a.shape:
            raise ShapeMismatchError(
                f"parameter shape {p.shape}, gradient shape {g.shape}, accumulator shape {a.shape}"
            )
        a *= state.gamma
        a += (1.0 - state.gamma) * np.square(g)
        p -= state.eta * g / np.sqrt(a + state.epsilon)
    return params, state


@dataclass
class PlateauScheduler:
    """Halves eta after `patience` consecutive non-improving validation losses."""

    eta: float
    factor: float = 0.5
    patience: int = 3
    min_delta: float = 1e-4
    min_eta: float = 0.0
    best_seen: float = math.inf
    epochs_since_improve: int = 0


def plateau_update(scheduler: PlateauScheduler, epoch_val_loss: float) -> float:
    """Feed one epoch's validation loss; returns the rate for the next epoch."""
    if epoch_val_loss < scheduler.best_seen - scheduler.min_delta:
        scheduler.best_seen = epoch_val_loss
        scheduler.epochs_since_improve = 0
    else:
        scheduler.epochs_since_improve += 1
        if scheduler.epochs_since_improve >= scheduler.patience:
            scheduler.eta = max(scheduler.eta * scheduler.factor, scheduler.min_eta)
            scheduler.epochs_since_improve = 0
    return scheduler.eta


@dataclass
class EarlyStopper:
    """Signals stop after `patience` epochs without validation accuracy gains."""

    patience: int = 8
    min_delta: float = 1e-4
    best_metric: float = -math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    epochs_seen: int = 0


def early_stop_check(stopper: EarlyStopper, epoch_val_accuracy: float) -> bool:
    """Feed one epoch's validation accuracy; True means stop now."""
    stopper.epochs_seen += 1
    if epoch_val_accuracy > stopper.best_metric + stopper.min_delta:
        stopper.best_metric = epoch_val_accuracy
        stopper.best_epoch = stopper.epochs_seen
        stopper.epochs_since_improve = 0
        return False
    stopper.epochs_since_improve += 1
    return stopper.epochs_since_improve >= stopper.patience


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 100
    eta: float = 0.1
    gamma: float = 0.95
    epsilon: float = 1e-7
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    early_stop_patience: int = 8
    min_delta: float = 1e-4
    dropout: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


class BatchSource(Protocol):
    def __len__(self) -> int: ...

    def take(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class _ArraySource:
    def __init__(self, images: np.ndarray, labels: np.ndarray) -> None:
        self.images = images
        self.labels = np.asarray(labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.images[indices], self.labels[indices]


def _as_source(data) -> BatchSource:
    if isinstance(data, tuple):
        return _ArraySource(*data)
    return data


def evaluate_model(model, data, batch_size: int = 50) -> tuple[float, float]:
    """Mean loss and accuracy over a dataset, in fixed-size chunks."""
    source = _as_source(data)
    n = len(source)
    if n == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        images, labels = source.take(idx)
        logits, _ = model.forward_train(images)
        batch = CrossEntropyBatch(logits, labels)
        total_loss += cross_entropy_loss(batch) * len(idx)
        correct += int(np.sum(logits.argmax(axis=1) == labels))
    return total_loss / n, correct / n


def train_model(model, train_data, val_data, config: TrainConfig) -> list[EpochRecord]:
    """Run the full loop; the model ends at its best validation epoch."""
    train_source = _as_source(train_data)
    val_source = _as_source(val_data)
    n = len(train_source)
    if n == 0:
        raise EmptyDatasetError("training set is empty")
    params = model.parameters()
    state = AdadeltaState.for_params(params, gamma=config.gamma, eta=config.eta, epsilon=config.epsilon)
    scheduler = PlateauScheduler(
        eta=config.eta,
        factor=config.plateau_factor,
        patience=config.plateau_patience,
        min_delta=config.min_delta,
    )
    stopper = EarlyStopper(patience=config.early_stop_patience, min_delta=config.min_delta)
    shuffle_rng = derive_rng(config.seed, ROLE_SHUFFLE)
    dropout_rng = derive_rng(config.seed, ROLE_DROPOUT)
    best_params = [p.copy() for p in params]
    history: list[EpochRecord] = []

    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            images, labels = train_source.take(idx)
            logits, cache = model.forward_train(images, dropout=config.dropout, rng=dropout_rng)
            batch = CrossEntropyBatch(logits, labels)
            running += cross_entropy_loss(batch) * len(idx)
            grads = model.backward(cache, cross_entropy_gradient(batch))
            adadelta_step(params, grads, state)
        train_loss = running / n
        val_loss, val_accuracy = evaluate_model(model, val_source, config.batch_size)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_accuracy, state.eta))
        state.eta = plateau_update(scheduler, val_loss)
        should_stop = early_stop_check(stopper, val_accuracy)
        if stopper.epochs_since_improve == 0:
            best_params = [p.copy() for p in params]
        if should_stop:
            break

    for p, best in zip(params, best_params):
        p[...] = best
    return history


def write_history_csv(history: list[EpochRecord], path: str) -> None:
    lines = ["epoch,train_loss,val_loss,val_accuracy,learning_rate"]
    for record in history:
        lines.append(
            f"{record.epoch},{record.train_loss!r},{record.val_loss!r},"
            f"{record.val_accuracy!r},{record.learning_rate!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
