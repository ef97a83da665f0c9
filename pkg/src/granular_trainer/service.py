import csv
import io
import logging
import os
from typing import Any, List, Mapping, Optional, Sequence

from pydantic import ValidationError

from granular_trainer.checkpoint import load_checkpoint, save_checkpoint
from granular_trainer.config import TrainConfig, load_train_config
from granular_trainer.evaluate import Metrics, evaluate, format_metrics, metrics_to_csv
from granular_trainer.hier_induce import build_hierarchy, centroids
from granular_trainer.models import ModelSpec, Variant
from granular_trainer.sweep import (
    ComparisonResult,
    SweepResult,
    compare_variants,
    sweep_alpha_beta,
)
from granular_trainer.training import TrainResult, history_to_csv, train
from shared.data import (
    Dataset,
    SynthConfig,
    gen_synthetic,
    load_dataset_dir,
    save_dataset_dir,
    standardize,
)
from shared.errors import ConfigError
from shared.taxonomy import (
    Taxonomy,
    ValidationReport,
    parse_taxonomy,
    serialize_taxonomy,
    validate,
)
from shared.utils import derive_seed, read_text, write_text

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.npz"
METRICS_FILE = "metrics.csv"
HISTORY_FILE = "history.csv"


class ExperimentService:
    """
    Runs the experiment workflows end to end: files in, files out, and a short
    human-readable summary on stdout.
    """

    def __init__(self, seed: Optional[int] = None):
        # None leaves the seed to the config file (or its default of 0).
        self.seed = seed

    def _train_config(
        self, config_path: Optional[str], overrides: Optional[Mapping[str, Any]]
    ) -> TrainConfig:
        text = read_text(config_path) if config_path else None
        values = {k: v for k, v in (overrides or {}).items() if v is not None}
        if self.seed is not None:
            values["seed"] = self.seed
        return load_train_config(text, values)

    def _model_spec(
        self, variant: Variant, ds: Dataset, cfg: TrainConfig, **architecture: Any
    ) -> ModelSpec:
        values = {k: v for k, v in architecture.items() if v is not None}
        try:
            return ModelSpec(
                variant=Variant(variant),
                input_dim=ds.input_dim,
                level_sizes=ds.taxonomy.level_sizes,
                seed=derive_seed(cfg.seed, "init"),
                **values,
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid model: {e}") from e

    def gen_data(
        self, level_sizes: Sequence[int], out_dir: str, **synth: Any
    ) -> List[str]:
        try:
            cfg = SynthConfig(
                level_sizes=tuple(level_sizes),
                seed=derive_seed(self.seed or 0, "data"),
                **{k: v for k, v in synth.items() if v is not None},
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid data settings: {e}") from e
        train_ds, test_ds, tax = gen_synthetic(cfg)
        paths = save_dataset_dir(out_dir, train_ds, test_ds)
        print(
            f"Wrote {len(paths)} files to {out_dir}: shape {list(tax.level_sizes)}, "
            f"N_train={train_ds.n}, N_test={test_ds.n}, d={train_ds.input_dim}"
        )
        return paths

    def train(
        self,
        data_dir: str,
        out_dir: str,
        variant: Variant = Variant.OURS,
        config_path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        taxonomy_path: Optional[str] = None,
        hidden_widths: Optional[Sequence[int]] = None,
        feature_dim: Optional[int] = None,
    ) -> TrainResult:
        train_ds, test_ds, tax = load_dataset_dir(data_dir, taxonomy_path)
        cfg = self._train_config(config_path, overrides)
        spec = self._model_spec(
            variant,
            train_ds,
            cfg,
            hidden_widths=tuple(hidden_widths) if hidden_widths is not None else None,
            feature_dim=feature_dim,
        )

        shape = list(tax.level_sizes)
        print(f"Training {spec.variant.value} on {data_dir} (shape {shape})")
        result = train(spec, train_ds, test_ds, cfg)

        checkpoint = os.path.join(out_dir, CHECKPOINT_FILE)
        save_checkpoint(checkpoint, result.params, result.scaler)
        write_text(os.path.join(out_dir, METRICS_FILE), metrics_to_csv(result.metrics))
        history = history_to_csv(result.history, tax.K)
        write_text(os.path.join(out_dir, HISTORY_FILE), history)
        print(f"Train loss: {result.initial_loss:.4f} -> {result.final_loss:.4f}")
        print(format_metrics(result.metrics))
        return result

    def evaluate(
        self,
        checkpoint_path: str,
        data_dir: str,
        split: str = "test",
        taxonomy_path: Optional[str] = None,
        out_path: Optional[str] = None,
    ) -> Metrics:
        params, scaler = load_checkpoint(checkpoint_path)
        train_ds, test_ds, tax = load_dataset_dir(data_dir, taxonomy_path)
        ds = train_ds if split == "train" else test_ds
        if params.spec.level_sizes != tax.level_sizes:
            raise ConfigError(
                f"Checkpoint was trained on level sizes "
                f"{list(params.spec.level_sizes)}, data has {list(tax.level_sizes)}"
            )
        if scaler is not None:
            ds = standardize(ds, scaler)
        metrics = evaluate(params, ds.features, ds.chains, tax)
        if out_path:
            write_text(out_path, metrics_to_csv(metrics))
        print(format_metrics(metrics))
        return metrics

    def sweep(
        self,
        data_dir: str,
        out_path: str,
        alphas: Sequence[float],
        betas: Sequence[float],
        seeds: Sequence[int],
        variant: Variant = Variant.OURS,
        config_path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        jobs: int = 1,
    ) -> SweepResult:
        train_ds, test_ds, tax = load_dataset_dir(data_dir)
        if tax.K != 2:
            raise ConfigError(
                f"The alpha/beta sweep needs a 2-level taxonomy, got K={tax.K}"
            )
        cfg = self._train_config(config_path, overrides)
        spec = self._model_spec(variant, train_ds, cfg)
        result = sweep_alpha_beta(
            spec, train_ds, test_ds, cfg, alphas, betas, seeds, jobs
        )
        write_text(out_path, result.to_csv())
        print(f"Wrote {len(result)} rows to {out_path}")
        print(result.format_table())
        return result

    def compare(
        self,
        data_dir: str,
        variants: Sequence[Variant],
        seeds: Sequence[int],
        out_path: Optional[str] = None,
        config_path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        jobs: int = 1,
    ) -> ComparisonResult:
        train_ds, test_ds, _ = load_dataset_dir(data_dir)
        cfg = self._train_config(config_path, overrides)
        spec = self._model_spec(variants[0], train_ds, cfg)
        result = compare_variants(spec, train_ds, test_ds, cfg, variants, seeds, jobs)
        if out_path:
            write_text(out_path, comparison_to_csv(result))
        print(result.format_table())
        return result

    def build_hierarchy(
        self,
        data_dir: str,
        level_sizes: Sequence[int],
        out_path: str,
        checkpoint_path: Optional[str] = None,
    ) -> Taxonomy:
        train_ds, _, _ = load_dataset_dir(data_dir)
        params = None
        if checkpoint_path:
            params, scaler = load_checkpoint(checkpoint_path)
            if scaler is not None:
                train_ds = standardize(train_ds, scaler)
        tax = build_hierarchy(centroids(train_ds, params), level_sizes)
        write_text(out_path, serialize_taxonomy(tax))
        mode = "backbone features" if params is not None else "raw features"
        shape = list(tax.level_sizes)
        print(f"Wrote taxonomy with shape {shape} ({mode}) to {out_path}")
        return tax

    def validate_taxonomy(self, path: str) -> ValidationReport:
        tax = parse_taxonomy(read_text(path))
        report = validate(tax)
        print(f"{path}: {report} (shape {list(tax.level_sizes)})")
        return report


def comparison_to_csv(result: ComparisonResult) -> str:
    K = len(result.rows[0].metrics.per_level_acc)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        [
            "variant",
            "seed",
            *(f"acc_{k}" for k in range(1, K + 1)),
            "avg_acc",
            "consistency_rate",
        ]
    )
    for row in result.rows:
        writer.writerow(
            [row.variant.value, row.seed]
            + [repr(acc) for acc in row.metrics.per_level_acc]
            + [repr(row.metrics.avg_acc), repr(row.metrics.consistency_rate)]
        )
    return buffer.getvalue()

