"""Mini-batch training loop with Adam, checkpointing, and early stopping.

Training is bitwise reproducible: batch order is a seeded shuffle, one
optimizer step runs per batch, and the best-validation checkpoint is
restored at the end. Reserved pad embedding rows are pinned to zero
through every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ParamStore, Tape
from .model import ImpressionInstance, MatchingModel

MODES = ("JOINT", "SINGLE_RETRIEVAL", "SINGLE_PRERANK")


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class TrainConfig:
    """Optimization knobs; alpha/gamma here override the model config."""

    batch_size: int = 128
    mode: str = "JOINT"
    alpha: float = 0.5
    gamma: float = 6.0
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class Adam:
    """Adam with bias correction over a ParamStore.

    Gradients of frozen rows are zeroed before the update and the rows
    themselves re-zeroed after it, so pad embeddings never move and
    their moments never accumulate.
    """

    def __init__(
        self,
        store: ParamStore,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> None:
        self._store = store
        self._lr = learning_rate
        self._b1 = beta1
        self._b2 = beta2
        self._eps = epsilon
        self._t = 0
        self._moments = {
            name: (np.zeros_like(e.value.data), np.zeros_like(e.value.data))
            for name, e in store.items()
            if e.trainable
        }

    @classmethod
    def from_config(cls, store: ParamStore, config: TrainConfig) -> "Adam":
        return cls(
            store,
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.adam_epsilon,
        )

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self._b1**self._t
        bc2 = 1.0 - self._b2**self._t
        for name, (m, v) in self._moments.items():
            entry = self._store.entry(name)
            g = entry.value.grad
            for r in entry.frozen_rows:
                g[r] = 0.0
            m *= self._b1
            m += (1.0 - self._b1) * g
            v *= self._b2
            v += (1.0 - self._b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self._eps)
            entry.value.data -= self._lr * update
            for r in entry.frozen_rows:
                entry.value.data[r] = 0.0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc_retrieval: float | None
    val_auc_prerank: float | None


@dataclass
class TrainResult:
    model: MatchingModel
    history: list[EpochStats]
    best_epoch: int


def _selection_key(stats: EpochStats, mode: str):
    """Early-stopping criterion: pre-rank AUC first in JOINT mode, the
    retrieval AUC as tie-break; single modes watch their own task."""
    if mode == "JOINT":
        return (stats.val_auc_prerank, stats.val_auc_retrieval)
    if mode == "SINGLE_RETRIEVAL":
        return (stats.val_auc_retrieval,)
    return (stats.val_auc_prerank,)


def _validation_aucs(
    model: MatchingModel,
    instances: Sequence[ImpressionInstance],
    config: TrainConfig,
) -> tuple[float | None, float | None]:
    from .evaluation import auc  # local import: evaluation harnesses import us

    if not instances:
        return None, None
    labels = np.array([i.label for i in instances])
    preds = model.predict(instances, gamma=config.gamma)
    auc_r = (
        auc(preds["retrieval"], labels) if config.mode != "SINGLE_PRERANK" else None
    )
    auc_p = auc(preds["prerank"], labels) if config.mode != "SINGLE_RETRIEVAL" else None
    return auc_r, auc_p


def train(
    model: MatchingModel,
    train_instances: Sequence[ImpressionInstance],
    val_instances: Sequence[ImpressionInstance],
    config: TrainConfig,
) -> TrainResult:
    """Run seeded mini-batch training and restore the best checkpoint.

    Raises TrainingDivergedError with batch diagnostics if the loss
    becomes non-finite.
    """
    if not train_instances:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    optimizer = Adam.from_config(model.params, config)
    history: list[EpochStats] = []
    best_key = None
    best_epoch = 0
    best_arrays = model.params.arrays()
    stale = 0
    n = len(train_instances)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.batch_size):
            batch = [train_instances[i] for i in order[lo : lo + config.batch_size]]
            model.params.zero_grads()
            with Tape() as tape:
                loss = model.loss_for_mode(batch, config.mode, config.alpha, config.gamma)
                value = loss.item()
                if not np.isfinite(value):
                    positives = sum(i.label for i in batch)
                    raise TrainingDivergedError(
                        f"non-finite loss {value!r} at epoch {epoch}, batch "
                        f"offset {lo} (size {len(batch)}, positives {positives})"
                    )
                tape.backward(loss)
            optimizer.step()
            batch_losses.append(value)
        auc_r, auc_p = _validation_aucs(model, val_instances, config)
        stats = EpochStats(epoch, float(np.mean(batch_losses)), auc_r, auc_p)
        history.append(stats)
        key = _selection_key(stats, config.mode)
        if key[0] is None:
            # no validation signal: keep the latest parameters
            best_arrays = model.params.arrays()
            best_epoch = epoch
            continue
        if best_key is None or key > best_key:
            best_key = key
            best_arrays = model.params.arrays()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.params.load_arrays(best_arrays)
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def write_history_csv(history: Sequence[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auc_retrieval", "val_auc_prerank"])
        for s in history:
            writer.writerow(
                [
                    s.epoch,
                    repr(s.train_loss),
                    "" if s.val_auc_retrieval is None else repr(s.val_auc_retrieval),
                    "" if s.val_auc_prerank is None else repr(s.val_auc_prerank),
                ]
            )
