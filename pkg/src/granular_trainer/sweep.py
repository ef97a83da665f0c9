"""
Experiment grids over independent training runs.

`sweep_alpha_beta` trains one two-level model per (alpha, beta, seed) cell with
loss weights (alpha, beta); `compare_variants` trains every requested variant
per seed on the same data. Cells share no state and may run in a process pool.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from multiprocessing import Pool
from typing import Callable, Dict, List, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import ValidationError

from granular_trainer.config import TrainConfig
from granular_trainer.evaluate import Metrics, MetricsSummary, summarize
from granular_trainer.models import ModelSpec, Variant
from granular_trainer.training import train
from shared.data import Dataset
from shared.errors import ConfigError
from shared.utils import derive_seed

logger = logging.getLogger(__name__)

SWEEP_HEADER = ("alpha", "beta", "seed", "coarse_acc", "fine_acc")

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    beta: float
    seed: int
    coarse_acc: float
    fine_acc: float


@dataclass(frozen=True)
class CellSummary:
    alpha: float
    beta: float
    runs: int
    coarse_mean: float
    coarse_std: float
    fine_mean: float
    fine_std: float


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return math.fsum(values) / len(values), std


@dataclass(frozen=True)
class SweepResult:
    rows: Tuple[SweepRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def cells(self) -> List[Tuple[float, float]]:
        """Distinct (alpha, beta) pairs in first-seen order."""
        return list(dict.fromkeys((row.alpha, row.beta) for row in self.rows))

    def rows_for(self, alpha: float, beta: float) -> List[SweepRow]:
        return [r for r in self.rows if r.alpha == alpha and r.beta == beta]

    def aggregate(self) -> List[CellSummary]:
        summaries = []
        for alpha, beta in self.cells():
            rows = self.rows_for(alpha, beta)
            coarse = _mean_std([r.coarse_acc for r in rows])
            fine = _mean_std([r.fine_acc for r in rows])
            summaries.append(CellSummary(alpha, beta, len(rows), *coarse, *fine))
        return summaries

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in self.rows:
            writer.writerow(
                [
                    repr(row.alpha),
                    repr(row.beta),
                    row.seed,
                    repr(row.coarse_acc),
                    repr(row.fine_acc),
                ]
            )
        return buffer.getvalue()

    def format_table(self) -> str:
        lines = [
            f"{'alpha':>6} {'beta':>6} {'runs':>4} {'coarse_acc':>16} {'fine_acc':>16}"
        ]
        for s in self.aggregate():
            lines.append(
                f"{s.alpha:>6g} {s.beta:>6g} {s.runs:>4d} "
                f"{100 * s.coarse_mean:>8.2f} ± {100 * s.coarse_std:5.2f} "
                f"{100 * s.fine_mean:>8.2f} ± {100 * s.fine_std:5.2f}"
            )
        return "\n".join(lines)


@dataclass(frozen=True)
class SweepCell:
    spec: ModelSpec
    cfg: TrainConfig
    train: Dataset
    test: Dataset


def _map(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> List[R]:
    if jobs > 1 and len(items) > 1:
        with Pool(processes=min(jobs, len(items))) as pool:
            return pool.map(fn, items)
    return [fn(item) for item in items]


def cell_configs(
    spec: ModelSpec, cfg: TrainConfig, seed: int, **updates: object
) -> Tuple[ModelSpec, TrainConfig]:
    """Per-run spec/config: init seed derived from `seed`, shuffling seeded by it."""
    spec_values = {**spec.model_dump(), "seed": derive_seed(seed, "init")}
    cfg_values = {**cfg.model_dump(), "seed": seed}
    for key, value in updates.items():
        if key in ModelSpec.model_fields:
            spec_values[key] = value
        else:
            cfg_values[key] = value
    try:
        return ModelSpec(**spec_values), TrainConfig(**cfg_values)
    except ValidationError as e:
        raise ConfigError(f"Invalid sweep cell {updates}: {e}") from e


def _run_sweep_cell(cell: SweepCell) -> SweepRow:
    result = train(cell.spec, cell.train, cell.test, cell.cfg)
    alpha, beta = cell.cfg.weights_for(2)
    row = SweepRow(
        alpha=alpha,
        beta=beta,
        seed=cell.cfg.seed,
        coarse_acc=result.metrics.per_level_acc[0],
        fine_acc=result.metrics.per_level_acc[1],
    )
    logger.info(
        "sweep cell alpha=%g beta=%g seed=%d: coarse %.4f fine %.4f",
        alpha, beta, row.seed, row.coarse_acc, row.fine_acc,
    )
    return row


def sweep_alpha_beta(
    spec: ModelSpec,
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: TrainConfig,
    alpha_values: Sequence[float],
    beta_values: Sequence[float],
    seeds: Sequence[int],
    jobs: int = 1,
) -> SweepResult:
    """
    One training run per (alpha, beta, seed), rows in grid order (alpha outer,
    then beta, then seed). Requires a two-level model.
    """
    if spec.K != 2:
        raise ConfigError(
            f"The alpha/beta sweep needs a 2-level taxonomy, got K={spec.K}"
        )
    if not alpha_values or not beta_values or not seeds:
        raise ConfigError("alpha, beta and seed lists must be non-empty")

    cells = []
    for alpha in alpha_values:
        for beta in beta_values:
            for seed in seeds:
                cell_spec, cell_cfg = cell_configs(
                    spec, cfg, seed, loss_weights=(float(alpha), float(beta))
                )
                cells.append(SweepCell(cell_spec, cell_cfg, train_ds, test_ds))
    logger.info("Running %d sweep cells with %d job(s)", len(cells), jobs)
    return SweepResult(tuple(_map(_run_sweep_cell, cells, jobs)))


@dataclass(frozen=True)
class ComparisonRow:
    variant: Variant
    seed: int
    metrics: Metrics


@dataclass(frozen=True)
class ComparisonResult:
    rows: Tuple[ComparisonRow, ...]

    def variants(self) -> List[Variant]:
        return list(dict.fromkeys(row.variant for row in self.rows))

    def summaries(self) -> Dict[Variant, MetricsSummary]:
        return {
            variant: summarize([r.metrics for r in self.rows if r.variant == variant])
            for variant in self.variants()
        }

    def paired_avg_acc(self, a: Variant, b: Variant) -> List[Tuple[float, float]]:
        """(avg_acc of a, avg_acc of b) per seed both variants ran with."""
        by_key = {(r.variant, r.seed): r.metrics.avg_acc for r in self.rows}
        seeds = dict.fromkeys(r.seed for r in self.rows)
        return [
            (by_key[(a, s)], by_key[(b, s)])
            for s in seeds
            if (a, s) in by_key and (b, s) in by_key
        ]

    def format_table(self) -> str:
        summaries = self.summaries()
        K = len(next(iter(summaries.values())).mean_acc)
        header = [f"{'variant':<15}"] + [f"{f'acc_{k}':>15}" for k in range(1, K + 1)]
        lines = [" ".join(header + [f"{'avg_acc':>15}"])]
        for variant, s in summaries.items():
            cells = [f"{variant.value:<15}"]
            for mean, std in zip(s.mean_acc, s.std_acc):
                cells.append(f"{100 * mean:>7.2f} ± {100 * std:5.2f}")
            cells.append(f"{100 * s.mean_avg_acc:>7.2f} ± {100 * s.std_avg_acc:5.2f}")
            lines.append(" ".join(cells))
        return "\n".join(lines)


def _run_comparison_cell(cell: SweepCell) -> ComparisonRow:
    result = train(cell.spec, cell.train, cell.test, cell.cfg)
    logger.info(
        "%s seed=%d: avg_acc %.4f",
        cell.spec.variant.value, cell.cfg.seed, result.metrics.avg_acc,
    )
    return ComparisonRow(cell.spec.variant, cell.cfg.seed, result.metrics)


def compare_variants(
    spec: ModelSpec,
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: TrainConfig,
    variants: Sequence[Variant],
    seeds: Sequence[int],
    jobs: int = 1,
) -> ComparisonResult:
    """Trains each variant once per seed; variants of one seed share the init seed."""
    if not variants or not seeds:
        raise ConfigError("variant and seed lists must be non-empty")
    cells = []
    for variant in variants:
        for seed in seeds:
            cell_spec, cell_cfg = cell_configs(
                spec, cfg, seed, variant=Variant(variant)
            )
            cells.append(SweepCell(cell_spec, cell_cfg, train_ds, test_ds))
    return ComparisonResult(tuple(_map(_run_comparison_cell, cells, jobs)))
