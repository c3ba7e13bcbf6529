"""Mini-batch Adam training with best-validation checkpoint selection."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import Batch, ClipFeatures, DatasetSplit, make_batches
from .errors import TrainingDiverged
from .features import FeatureConfig, FeatureStats
from .metrics import accuracy, ScoredSet, score_entries
from .model import ArchConfig, ModelKind, build_model
from .nn import AdamState, adam_step, bce_with_logits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 42
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    arch: ModelKind = ModelKind.MFAAN
    features: FeatureConfig = field(default_factory=FeatureConfig)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_accuracy:.6f}"


@dataclass
class TrainResult:
    model: object
    history: List[EpochLog]
    best_epoch: int


def fit_normalization(model, entries, features: Dict[str, ClipFeatures]):
    stats = {k: FeatureStats.from_matrices(features[e.clip_id][k] for e in entries)
             for k in model.kinds}
    model.set_normalization(stats)


def train_step(model, batch: Batch, state: AdamState) -> float:
    """One forward/backward/Adam update on a batch; returns the mean loss."""
    model.zero_grad()
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        logits = model.forward_batch(batch.features)
        losses, grad = bce_with_logits(logits, batch.labels)
        loss = float(np.mean(losses, dtype=np.float64))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at step {state.step + 1}")
    model.backward(grad / len(batch.labels))
    adam_step(model.parameters(), state)
    return loss


def train(cfg: TrainConfig, split: DatasetSplit, features: Dict[str, ClipFeatures],
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train for cfg.epochs and return the model from the best validation epoch.

    Ties in validation accuracy keep the earliest epoch.
    """
    arch = ArchConfig.for_features(cfg.features)
    model = build_model(cfg.arch, arch, cfg.features, cfg.seed)
    fit_normalization(model, split.train, features)
    state = AdamState(lr=cfg.lr)
    val_labels = np.array([int(e.label) for e in split.val])

    history = []
    best, best_acc, best_epoch = None, -1.0, -1
    for epoch in range(cfg.epochs):
        batches = make_batches(split.train, features, cfg.batch_size, cfg.seed, epoch,
                               kinds=model.kinds)
        losses = [train_step(model, b, state) for b in batches]
        sizes = [len(b.labels) for b in batches]
        val_acc = accuracy(ScoredSet(score_entries(model, split.val, features), val_labels))
        entry = EpochLog(epoch, float(np.average(losses, weights=sizes)), val_acc)
        history.append(entry)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, entry.train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(entry)
        if val_acc > best_acc:
            best, best_acc, best_epoch = copy.deepcopy(model), val_acc, epoch
    return TrainResult(best, history, best_epoch)
