"""
Feature-vector datasets labelled at the finest level of a taxonomy.

Dataset CSV: header `f0,...,f{d-1},label`, one row per sample, `label` is the
finest-level category name. A dataset directory holds `train.csv`,
`test.csv` and `taxonomy.txt`.
"""

import csv
import io
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.preprocessing import StandardScaler

from shared.errors import DataError, TaxonomyError
from shared.taxonomy import (
    Taxonomy,
    balanced_taxonomy,
    chain_matrix,
    load_taxonomy,
    serialize_taxonomy,
)
from shared.utils import read_text, write_text

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.csv"
TEST_FILE = "test.csv"
TAXONOMY_FILE = "taxonomy.txt"


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    fine_labels: np.ndarray
    taxonomy: Taxonomy
    split: str = "train"

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.fine_labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise DataError(
                f"Features must be a non-empty [N x d] matrix, got {features.shape}"
            )
        if labels.shape != (features.shape[0],):
            raise DataError(f"{labels.size} labels for {features.shape[0]} samples")
        if not np.all(np.isfinite(features)):
            raise DataError("Features contain NaN or Inf")
        fine_count = self.taxonomy.level_sizes[-1]
        if labels.min() < 0 or labels.max() >= fine_count:
            raise DataError(f"Finest label out of range 0..{fine_count - 1}")
        if self.split not in ("train", "test"):
            raise DataError(f"Unknown split tag {self.split!r}")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "fine_labels", labels)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def chains(self) -> np.ndarray:
        """[N x K] label chains derived from the finest labels."""
        return chain_matrix(self.taxonomy, self.fine_labels)

    def with_taxonomy(self, tax: Taxonomy) -> "Dataset":
        """Re-binds the samples to another hierarchy over the same finest names."""
        old_names = self.taxonomy.level_names[-1]
        try:
            mapping = np.array([tax.index_of(tax.K, name) for name in old_names])
        except TaxonomyError as e:
            raise DataError(
                f"Taxonomy does not cover the dataset's categories: {e}"
            ) from e
        return Dataset(self.features, mapping[self.fine_labels], tax, self.split)

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.fine_labels, self.taxonomy, self.split)


class Batch(NamedTuple):
    features: np.ndarray
    chains: np.ndarray
    indices: np.ndarray


class SynthConfig(BaseModel):
    """Shape and noise of a synthetic hierarchical dataset."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    level_sizes: Tuple[int, ...] = (4, 16)
    train_per_class: int = Field(50, ge=1)
    test_per_class: int = Field(20, ge=1)
    input_dim: int = Field(20, ge=1)
    coarse_scale: float = Field(10.0, gt=0)
    fine_scale: float = Field(3.0, gt=0)
    noise: float = Field(1.5, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _warn_on_overlap(self) -> "SynthConfig":
        if not self.level_sizes:
            raise ValueError("level_sizes must name at least one level")
        if self.coarse_scale <= self.fine_scale:
            logger.warning(
                "coarse_scale (%s) <= fine_scale (%s): coarse clusters will overlap",
                self.coarse_scale,
                self.fine_scale,
            )
        return self


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    directions = rng.standard_normal((rows, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def fine_centers(cfg: SynthConfig, tax: Taxonomy) -> np.ndarray:
    """Cluster centers of the finest categories; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0])
    centers = _unit_rows(rng, tax.level_sizes[0], cfg.input_dim) * cfg.coarse_scale
    for k in range(2, tax.K + 1):
        parents = np.array([tax.parent(k, c) for c in range(tax.level_sizes[k - 1])])
        offsets = _unit_rows(rng, len(parents), cfg.input_dim)
        centers = centers[parents] + offsets * (cfg.fine_scale * 0.5 ** (k - 2))
    return centers


def gen_synthetic(cfg: SynthConfig) -> Tuple[Dataset, Dataset, Taxonomy]:
    """
    Balanced taxonomy of the requested shape plus train/test samples drawn
    around nested cluster centers with isotropic noise.
    """
    tax = balanced_taxonomy(cfg.level_sizes)
    centers = fine_centers(cfg, tax)
    _, train_seq, test_seq = np.random.SeedSequence(cfg.seed).spawn(3)

    def sample(seq: np.random.SeedSequence, per_class: int, split: str) -> Dataset:
        rng = np.random.default_rng(seq)
        labels = np.repeat(np.arange(tax.level_sizes[-1]), per_class)
        noise = rng.standard_normal((labels.size, cfg.input_dim))
        return Dataset(centers[labels] + cfg.noise * noise, labels, tax, split)

    train = sample(train_seq, cfg.train_per_class, "train")
    test = sample(test_seq, cfg.test_per_class, "test")
    logger.info(
        "Generated synthetic data: shape %s, %d train / %d test samples, d=%d",
        list(tax.level_sizes),
        train.n,
        test.n,
        cfg.input_dim,
    )
    return train, test, tax


def load_csv(text: str, tax: Taxonomy, split: str = "train") -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("Empty dataset file") from None
    header = [column.strip() for column in header]
    dim = len(header) - 1
    expected = [f"f{i}" for i in range(dim)] + ["label"]
    if dim < 1 or header != expected:
        raise DataError(
            f"Bad header {','.join(header)!r}; expected f0,...,f{{d-1}},label"
        )

    rows: List[List[float]] = []
    labels: List[int] = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise DataError(
                f"Line {line_no}: expected {dim + 1} fields, got {len(row)}"
            )
        try:
            values = [float(field) for field in row[:dim]]
        except ValueError:
            raise DataError(f"Line {line_no}: non-numeric feature value") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"Line {line_no}: non-finite feature value")
        name = row[dim].strip()
        if not tax.has_name(tax.K, name):
            raise DataError(f"Line {line_no}: unknown label {name!r}")
        rows.append(values)
        labels.append(tax.index_of(tax.K, name))

    if not rows:
        raise DataError("Dataset file has a header but no rows")
    return Dataset(np.array(rows), np.array(labels), tax, split)


def save_csv(ds: Dataset) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([f"f{i}" for i in range(ds.input_dim)] + ["label"])
    names = ds.taxonomy.level_names[-1]
    for features, label in zip(ds.features, ds.fine_labels):
        writer.writerow([repr(float(v)) for v in features] + [names[label]])
    return buffer.getvalue()


def save_dataset_dir(out_dir: str, train: Dataset, test: Dataset) -> List[str]:
    paths = [
        os.path.join(out_dir, TRAIN_FILE),
        os.path.join(out_dir, TEST_FILE),
        os.path.join(out_dir, TAXONOMY_FILE),
    ]
    write_text(paths[0], save_csv(train))
    write_text(paths[1], save_csv(test))
    write_text(paths[2], serialize_taxonomy(train.taxonomy))
    return paths


def load_dataset_dir(
    data_dir: str, taxonomy_path: Optional[str] = None
) -> Tuple[Dataset, Dataset, Taxonomy]:
    """Loads train/test CSVs; `taxonomy_path` overrides the directory's taxonomy."""
    tax = load_taxonomy(taxonomy_path or os.path.join(data_dir, TAXONOMY_FILE))
    train = load_csv(read_text(os.path.join(data_dir, TRAIN_FILE)), tax, "train")
    test = load_csv(read_text(os.path.join(data_dir, TEST_FILE)), tax, "test")
    if train.input_dim != test.input_dim:
        raise DataError(
            f"Train has {train.input_dim} features but test has {test.input_dim}"
        )
    return train, test, tax


def batches(
    ds: Dataset,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
) -> Iterator[Batch]:
    """
    One pass over the dataset. With shuffling, the permutation depends only on
    (seed, epoch). The last batch may be smaller.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if ds.n == 0:
        raise DataError("Cannot batch an empty dataset")
    order = np.arange(ds.n)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(ds.n)
    chains = ds.chains
    for start in range(0, ds.n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(ds.features[idx], chains[idx], idx)


def fit_standardizer(train: Dataset) -> StandardScaler:
    """Per-dimension mean 0 / variance 1 statistics over the training split."""
    return StandardScaler().fit(train.features)


def standardize(ds: Dataset, scaler: StandardScaler) -> Dataset:
    return ds.with_features(scaler.transform(ds.features))


def scaler_from_stats(mean: np.ndarray, scale: np.ndarray) -> StandardScaler:
    """Rebuilds a fitted scaler from saved statistics."""
    scaler = StandardScaler()
    scaler.mean_ = np.asarray(mean, dtype=np.float64)
    scaler.scale_ = np.asarray(scale, dtype=np.float64)
    scaler.var_ = scaler.scale_**2
    scaler.n_features_in_ = scaler.mean_.shape[0]
    return scaler
