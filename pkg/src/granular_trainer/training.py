import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from sklearn.preprocessing import StandardScaler

from granular_trainer.config import TrainConfig, load_train_config
from granular_trainer.evaluate import Metrics, evaluate
from granular_trainer.models import (
    ModelSpec,
    ParamSet,
    forward,
    init_params,
    total_loss,
)
from granular_trainer.optim import Velocity, grads_by_name, sgd_step
from shared.data import Batch, Dataset, batches, fit_standardizer, standardize
from shared.errors import ConfigError, DivergenceError
from shared.tensor_core import Tape
from shared.utils import derive_seed

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1.0e6

__all__ = [
    "EpochRecord",
    "TrainConfig",
    "TrainResult",
    "dataset_loss",
    "load_train_config",
    "train",
    "train_step",
]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_metrics: Optional[Metrics]


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: ParamSet
    history: Tuple[EpochRecord, ...]
    metrics: Metrics
    initial_loss: float
    final_loss: float
    scaler: Optional[StandardScaler] = None


def dataset_loss(params: ParamSet, ds: Dataset, weights: Sequence[float]) -> float:
    """Weighted total loss over a whole dataset in one forward pass."""
    tape = Tape()
    logits = forward(params, ds.features, tape)
    return total_loss(tape, logits, ds.chains, weights).item()


def train_step(
    params: ParamSet,
    batch: Batch,
    weights: Sequence[float],
    cfg: TrainConfig,
    state: Optional[Velocity] = None,
) -> Tuple[ParamSet, Velocity, float]:
    """forward -> total_loss -> backward -> sgd_step on one batch."""
    tape = Tape(check_finite=cfg.check_finite)
    logits = forward(params, batch.features, tape, stop_gradient=cfg.stop_gradient)
    loss = total_loss(tape, logits, batch.chains, weights)
    value = loss.item()
    if not math.isfinite(value) or value > DIVERGENCE_THRESHOLD:
        raise DivergenceError(
            f"Training diverged: batch loss {value!r} "
            f"(lr_backbone={cfg.lr_backbone}, lr_heads={cfg.lr_heads})"
        )
    grads = tape.backward(loss)
    new_params, state = sgd_step(params, grads_by_name(params, grads), cfg, state)
    return new_params, state, value


def _check_compatible(spec: ModelSpec, train_ds: Dataset, test_ds: Dataset) -> None:
    tax = train_ds.taxonomy
    if spec.level_sizes != tax.level_sizes:
        raise ConfigError(
            f"Model expects level sizes {list(spec.level_sizes)} but the taxonomy "
            f"has {list(tax.level_sizes)}"
        )
    if test_ds.taxonomy.level_sizes != tax.level_sizes:
        raise ConfigError("Train and test datasets use different taxonomies")
    if spec.input_dim != train_ds.input_dim or spec.input_dim != test_ds.input_dim:
        raise ConfigError(
            f"Model input_dim {spec.input_dim} does not match the data "
            f"({train_ds.input_dim} train / {test_ds.input_dim} test)"
        )


def train(
    spec: ModelSpec, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig
) -> TrainResult:
    """
    Trains a fresh model from `init_params(spec)` for cfg.epochs epochs and
    evaluates it on the test split. Deterministic in (spec, data, cfg).
    """
    _check_compatible(spec, train_ds, test_ds)
    weights = cfg.weights_for(spec.K)

    scaler = None
    if cfg.standardize:
        scaler = fit_standardizer(train_ds)
        train_ds, test_ds = standardize(train_ds, scaler), standardize(test_ds, scaler)

    params = init_params(spec)
    initial_loss = dataset_loss(params, train_ds, weights)
    logger.info(
        "Training %s (K=%d, D=%d) for %d epochs, initial loss %.4f",
        spec.variant.value,
        spec.K,
        spec.feature_dim,
        cfg.epochs,
        initial_loss,
    )

    shuffle_seed = derive_seed(cfg.seed, "shuffle")
    test_chains = test_ds.chains
    state: Optional[Velocity] = None
    history: List[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for batch in batches(
            train_ds, cfg.batch_size, shuffle=True, seed=shuffle_seed, epoch=epoch
        ):
            params, state, value = train_step(params, batch, weights, cfg, state)
            total += value * len(batch.indices)
            count += len(batch.indices)
        train_loss = total / count

        test_metrics = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            test_metrics = evaluate(
                params, test_ds.features, test_chains, test_ds.taxonomy
            )
            logger.info(
                "epoch %d loss %.4f test acc %s avg %.4f",
                epoch,
                train_loss,
                " ".join(f"{acc:.4f}" for acc in test_metrics.per_level_acc),
                test_metrics.avg_acc,
            )
        history.append(EpochRecord(epoch, train_loss, test_metrics))

    metrics = history[-1].test_metrics
    assert metrics is not None
    final_loss = dataset_loss(params, train_ds, weights)
    return TrainResult(
        params=params,
        history=tuple(history),
        metrics=metrics,
        initial_loss=initial_loss,
        final_loss=final_loss,
        scaler=scaler,
    )


def history_to_csv(history: Sequence[EpochRecord], K: int) -> str:
    """epoch,train_loss,acc_1..acc_K,avg_acc; accuracy cells empty on skipped epochs."""
    header = ["epoch", "train_loss", *(f"acc_{k}" for k in range(1, K + 1)), "avg_acc"]
    lines = [",".join(header)]
    for record in history:
        cells = [str(record.epoch), repr(record.train_loss)]
        if record.test_metrics is None:
            cells.extend([""] * (K + 1))
        else:
            cells.extend(repr(acc) for acc in record.test_metrics.per_level_acc)
            cells.append(repr(record.test_metrics.avg_acc))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
