"""
Label-hierarchy induction by average-linkage agglomerative clustering of
per-category mean features.

Starting from one cluster per finest category, clusters are merged closest
first. Each time the cluster count reaches a requested level size, the current
partition is recorded; the recorded partitions become the coarser levels of
the induced taxonomy, and the finest level keeps the dataset's category names.
"""

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import AgglomerativeClustering

from granular_trainer.models import ParamSet, backbone_forward
from shared.data import Dataset
from shared.errors import DataError, TaxonomyError
from shared.taxonomy import Taxonomy, require_valid
from shared.tensor_core import Tape

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ClassCentroids:
    """One mean feature vector per finest category, in category index order."""

    vectors: np.ndarray
    names: Tuple[str, ...]

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def embed(params: ParamSet, features: np.ndarray) -> np.ndarray:
    """Backbone features f of a trained model (first backbone for vanilla_multi)."""
    return backbone_forward(params, features, Tape()).numpy()


def centroids(ds: Dataset, params: Optional[ParamSet] = None) -> ClassCentroids:
    features = ds.features if params is None else embed(params, ds.features)
    category_count = ds.taxonomy.level_sizes[-1]
    counts = np.bincount(ds.fine_labels, minlength=category_count)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        names = [ds.taxonomy.name(ds.taxonomy.K, int(i)) for i in empty[:5]]
        raise DataError(f"{empty.size} categories have no samples, e.g. {names}")

    sums = np.zeros((category_count, features.shape[1]))
    np.add.at(sums, ds.fine_labels, features)
    vectors = sums / counts[:, None]
    if not np.all(np.isfinite(vectors)):
        raise DataError("Class centroids contain NaN or Inf")
    return ClassCentroids(vectors, ds.taxonomy.level_names[-1])


def _check_level_sizes(level_sizes: Sequence[int], category_count: int) -> List[int]:
    sizes = [int(s) for s in level_sizes]
    if any(s < 1 for s in sizes):
        raise TaxonomyError(f"Level sizes must be >= 1, got {sizes}")
    if any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise TaxonomyError(f"Level sizes must be strictly increasing, got {sizes}")
    if sizes and sizes[-1] >= category_count:
        raise TaxonomyError(
            f"Level size {sizes[-1]} must be smaller than the {category_count} "
            f"finest categories"
        )
    return sizes


def _relabel(assignment: np.ndarray) -> np.ndarray:
    """Renumbers cluster ids by first appearance over the finest categories."""
    mapping: Dict[int, int] = {}
    return np.array([mapping.setdefault(int(c), len(mapping)) for c in assignment])


def merge_partitions(
    vectors: np.ndarray, sizes: Sequence[int]
) -> Dict[int, np.ndarray]:
    """
    Replays the full average-linkage merge tree and returns, for each requested
    cluster count, the partition of the rows at that point (relabelled).
    """
    count = vectors.shape[0]
    model = AgglomerativeClustering(
        n_clusters=None,
        distance_threshold=0.0,
        linkage="average",
        metric="euclidean",
        compute_full_tree=True,
    ).fit(vectors)

    targets = set(sizes)
    members: Dict[int, List[int]] = {i: [i] for i in range(count)}
    snapshots: Dict[int, np.ndarray] = {}
    remaining = count
    for step, (a, b) in enumerate(model.children_):
        members[count + step] = members.pop(int(a)) + members.pop(int(b))
        remaining -= 1
        if remaining in targets:
            assignment = np.empty(count, dtype=np.int64)
            for cluster, rows in enumerate(members.values()):
                assignment[rows] = cluster
            snapshots[remaining] = _relabel(assignment)
    return snapshots


def build_hierarchy(c: ClassCentroids, level_sizes: Sequence[int]) -> Taxonomy:
    """
    Taxonomy with levels of sizes (*level_sizes, c.count). Coarser levels are
    named "L{k}_{i}"; the finest level keeps the centroid names.
    """
    sizes = _check_level_sizes(level_sizes, c.count)
    if not sizes:
        return Taxonomy.from_parent_maps([c.names], [])

    snapshots = merge_partitions(c.vectors, sizes)
    # partitions[k - 1] maps finest index -> cluster at level k
    partitions = [snapshots[size] for size in sizes] + [np.arange(c.count)]

    level_names: List[Tuple[str, ...]] = [
        tuple(f"L{k}_{i}" for i in range(size)) for k, size in enumerate(sizes, start=1)
    ]
    level_names.append(tuple(c.names))
    parent_maps = []
    for k in range(1, len(partitions)):
        parents = np.empty(len(level_names[k]), dtype=np.int64)
        parents[partitions[k]] = partitions[k - 1]
        parent_maps.append(parents.tolist())

    tax = require_valid(Taxonomy.from_parent_maps(level_names, parent_maps))
    logger.info("Induced hierarchy with level sizes %s", list(tax.level_sizes))
    return tax


def partition_of(tax: Taxonomy, level: int) -> FrozenSet[FrozenSet[int]]:
    """The finest categories grouped by their ancestor at `level`, label-free."""
    groups: Dict[int, List[int]] = {}
    for fine, row in enumerate(tax.chain_table):
        groups.setdefault(int(row[level - 1]), []).append(fine)
    return frozenset(frozenset(group) for group in groups.values())
