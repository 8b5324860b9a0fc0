"""Greedy forward selection over pooled validation predictions.

The pool caps stored configurations per algorithm; selection picks with
replacement and returns the best prefix seen, so the result never scores
below the best single entry on the selection set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .objective import balanced_accuracy, mean_squared_error

DEFAULT_ENSEMBLE_SIZE = 50
DEFAULT_TOP_PER_ALGORITHM = 3


class EnsembleError(ValueError):
    """Pool misuse: misaligned predictions or metric/task mismatch."""


@dataclass
class PoolEntry:
    algorithm: str
    config: dict[str, Any]
    predictions: np.ndarray  # (n_valid, n_classes) probabilities, or (n_valid,) values
    score: float  # validation utility, higher is better


@dataclass
class ModelPool:
    """Validation predictions of the best configurations, capped per algorithm."""

    n_top: int = DEFAULT_TOP_PER_ALGORITHM
    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def _check_alignment(self, predictions: np.ndarray) -> None:
        if self.entries and predictions.shape != self.entries[0].predictions.shape:
            raise EnsembleError(
                f"predictions shape {predictions.shape} does not match the pool's "
                f"{self.entries[0].predictions.shape}"
            )

    def record(self, algorithm: str, config: dict[str, Any],
               predictions: np.ndarray, score: float) -> None:
        """Insert; beyond n_top per algorithm the worst entry is evicted if beaten."""
        predictions = np.asarray(predictions, dtype=float)
        self._check_alignment(predictions)
        for entry in self.entries:
            if entry.algorithm == algorithm and entry.config == config:
                if score > entry.score:
                    entry.predictions = predictions
                    entry.score = score
                return
        group = [e for e in self.entries if e.algorithm == algorithm]
        if len(group) >= self.n_top:
            worst = min(group, key=lambda e: e.score)
            if score <= worst.score:
                return
            self.entries.remove(worst)
        self.entries.append(PoolEntry(algorithm, dict(config), predictions, float(score)))


@dataclass
class EnsembleWeights:
    counts: np.ndarray  # per-entry selection counts
    size: int

    def __post_init__(self):
        if int(np.sum(self.counts)) != self.size:
            raise EnsembleError("selection counts must sum to the ensemble size")


def _utility(metric: str, averaged: np.ndarray, labels: np.ndarray) -> float:
    if metric == "balanced_accuracy":
        return balanced_accuracy(np.argmax(averaged, axis=1), labels)
    if metric == "mse":
        return -mean_squared_error(averaged, labels)
    raise EnsembleError(f"unknown metric {metric!r}")


def _check_metric_shape(metric: str, predictions: np.ndarray) -> None:
    if metric == "balanced_accuracy" and predictions.ndim != 2:
        raise EnsembleError("balanced_accuracy needs class-probability predictions")
    if metric == "mse" and predictions.ndim != 1:
        raise EnsembleError("mse needs scalar predictions")


def ensemble_select(
    pool: ModelPool, size: int = DEFAULT_ENSEMBLE_SIZE, metric: str = "balanced_accuracy",
    labels: np.ndarray | None = None,
) -> EnsembleWeights:
    """Greedy selection with replacement for `size` rounds; best prefix returned."""
    if not pool.entries:
        raise EnsembleError("empty pool")
    if size < 1:
        raise EnsembleError("ensemble size must be >= 1")
    labels = np.asarray(labels)
    _check_metric_shape(metric, pool.entries[0].predictions)
    if labels.shape[0] != pool.entries[0].predictions.shape[0]:
        raise EnsembleError("labels are not aligned with the pool's validation index")

    stacked = [e.predictions for e in pool.entries]
    counts = np.zeros(len(pool.entries), dtype=int)
    running = np.zeros_like(stacked[0])
    best_counts, best_score = None, -np.inf
    for round_idx in range(1, size + 1):
        scores = [
            _utility(metric, (running + preds) / round_idx, labels) for preds in stacked
        ]
        pick = int(np.argmax(scores))  # argmax takes the earliest on ties
        running = running + stacked[pick]
        counts[pick] += 1
        if scores[pick] > best_score:
            best_score = scores[pick]
            best_counts = counts.copy()
    return EnsembleWeights(counts=best_counts, size=int(best_counts.sum()))


def ensemble_predict(
    pool: ModelPool, weights: EnsembleWeights, entry_predictions: list[np.ndarray]
) -> np.ndarray:
    """Count-weighted average; classification returns argmax labels (ties to low index)."""
    if len(entry_predictions) != len(pool.entries):
        raise EnsembleError(
            f"need predictions for all {len(pool.entries)} entries, got {len(entry_predictions)}"
        )
    if len(weights.counts) != len(pool.entries):
        raise EnsembleError("weights are not aligned with the pool")
    total = int(np.sum(weights.counts))
    if total == 0:
        raise EnsembleError("empty ensemble")
    first = np.asarray(entry_predictions[0], dtype=float)
    averaged = np.zeros_like(first)
    for count, preds in zip(weights.counts, entry_predictions):
        if count == 0:
            continue
        preds = np.asarray(preds, dtype=float)
        if preds.shape != first.shape:
            raise EnsembleError("entry predictions disagree on shape")
        averaged += count * preds
    averaged /= total
    if averaged.ndim == 2:
        return np.argmax(averaged, axis=1)
    return averaged
