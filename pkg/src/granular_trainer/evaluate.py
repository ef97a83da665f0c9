"""
Inference and metrics. Accuracies are fractions in [0, 1] everywhere except
`format_metrics`, which renders percentages for display.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from granular_trainer.models import ParamSet, forward
from shared.errors import ShapeError, TaxonomyError
from shared.taxonomy import Taxonomy
from shared.tensor_core import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    per_level_acc: Tuple[float, ...]
    consistency_rate: float
    n: int

    @property
    def K(self) -> int:
        return len(self.per_level_acc)

    @property
    def avg_acc(self) -> float:
        return math.fsum(self.per_level_acc) / len(self.per_level_acc)

    @property
    def fine_acc(self) -> float:
        """Single-label accuracy: the finest level alone."""
        return self.per_level_acc[-1]


@dataclass(frozen=True)
class MetricsSummary:
    """Mean and sample standard deviation over repeated runs."""

    mean_acc: Tuple[float, ...]
    std_acc: Tuple[float, ...]
    mean_avg_acc: float
    std_avg_acc: float
    runs: int


def predict_logits(params: ParamSet, x: Union[np.ndarray, Tensor]) -> List[np.ndarray]:
    logits = forward(params, x, Tape())
    return [level.numpy() for level in logits]


def predict(params: ParamSet, x: Union[np.ndarray, Tensor]) -> np.ndarray:
    """
    [n x K] predicted chains: the argmax of every head independently. Exact
    ties go to the lowest index; no cross-level consistency is enforced.
    """
    return argmax_chains(predict_logits(params, x))


def argmax_chains(logits: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.argmax(level, axis=1) for level in logits], axis=1)


def _check_chains(chains: np.ndarray, tax: Taxonomy) -> np.ndarray:
    chains = np.asarray(chains, dtype=np.int64)
    if chains.ndim != 2 or chains.shape[1] != tax.K:
        raise ShapeError(f"Expected [n x {tax.K}] chains, got shape {chains.shape}")
    for k, size in enumerate(tax.level_sizes):
        column = chains[:, k]
        if column.size and (column.min() < 0 or column.max() >= size):
            raise TaxonomyError(f"Predicted index out of range at level {k + 1}")
    return chains


def consistency_rate(preds: np.ndarray, tax: Taxonomy) -> float:
    """Fraction of chains where every level's parent is the prediction one level up."""
    preds = _check_chains(preds, tax)
    if preds.shape[0] == 0:
        raise ShapeError("consistency_rate of zero predictions")
    consistent = np.ones(preds.shape[0], dtype=bool)
    for k in range(2, tax.K + 1):
        consistent &= tax.parent_table(k)[preds[:, k - 1]] == preds[:, k - 2]
    return float(consistent.mean())


def accuracy(preds: np.ndarray, truth: np.ndarray, tax: Taxonomy) -> Metrics:
    preds = _check_chains(preds, tax)
    truth = _check_chains(truth, tax)
    if preds.shape != truth.shape:
        raise ShapeError(f"{preds.shape[0]} predictions for {truth.shape[0]} samples")
    if preds.shape[0] == 0:
        raise ShapeError("accuracy of zero samples")
    per_level = tuple(float(v) for v in (preds == truth).mean(axis=0))
    return Metrics(per_level, consistency_rate(preds, tax), int(preds.shape[0]))


def evaluate(
    params: ParamSet, features: np.ndarray, chains: np.ndarray, tax: Taxonomy
) -> Metrics:
    return accuracy(predict(params, features), chains, tax)


def summarize(metrics: Sequence[Metrics]) -> MetricsSummary:
    """Per-level mean and sample std (ddof=1; 0.0 for a single run)."""
    if not metrics:
        raise ShapeError("summarize needs at least one Metrics")
    K = metrics[0].K
    if any(m.K != K for m in metrics):
        raise ShapeError("Cannot summarize metrics with different level counts")
    table = np.array([m.per_level_acc for m in metrics])
    avg = np.array([m.avg_acc for m in metrics])
    ddof = 1 if len(metrics) > 1 else 0
    return MetricsSummary(
        mean_acc=tuple(float(v) for v in table.mean(axis=0)),
        std_acc=tuple(float(v) for v in table.std(axis=0, ddof=ddof)),
        mean_avg_acc=float(avg.mean()),
        std_avg_acc=float(avg.std(ddof=ddof)),
        runs=len(metrics),
    )


def format_metrics(metrics: Metrics) -> str:
    lines = [
        f"level {k}: acc {100 * acc:.2f}%"
        for k, acc in enumerate(metrics.per_level_acc, start=1)
    ]
    lines.append(f"avg_acc: {100 * metrics.avg_acc:.2f}%")
    lines.append(f"consistency_rate: {100 * metrics.consistency_rate:.2f}%")
    lines.append(f"samples: {metrics.n}")
    return "\n".join(lines)


def metrics_to_csv(metrics: Metrics) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["level", "acc"])
    for k, acc in enumerate(metrics.per_level_acc, start=1):
        writer.writerow([k, repr(acc)])
    writer.writerow(["avg_acc", repr(metrics.avg_acc)])
    writer.writerow(["consistency_rate", repr(metrics.consistency_rate)])
    return buffer.getvalue()
