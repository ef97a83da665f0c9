"""
Coarse-to-fine label hierarchies.

Levels are 1-based (level 1 is the coarsest, level K the finest); category
indices within a level are 0-based. Only the finest label of a sample is ever
stored; coarser labels are derived through the parent maps.

Taxonomy file format:

    # comments start with '#'
    levels=3
    Passeriformes,Icteridae,Brewer Blackbird
    Passeriformes,Icteridae,Red winged Blackbird
    ...

One line per finest category, names written coarse to fine. Indices are
assigned in order of first appearance.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from shared.errors import TaxonomyError
from shared.utils import read_text

logger = logging.getLogger(__name__)

Link = Tuple[int, int]


@dataclass(frozen=True)
class Taxonomy:
    """
    A K-level label hierarchy.

    `links[k - 2]` lists the (child, parent) pairs between level k and level
    k - 1. A valid taxonomy has exactly one pair per level-k category; the
    edge-list form exists so that `validate` can report broken hierarchies
    instead of them being unrepresentable.
    """

    level_names: Tuple[Tuple[str, ...], ...]
    links: Tuple[Tuple[Link, ...], ...]

    @classmethod
    def from_parent_maps(
        cls,
        level_names: Sequence[Sequence[str]],
        parent_maps: Sequence[Sequence[int]],
    ) -> "Taxonomy":
        """`parent_maps[i][c]` is the level-(i+1) parent of category c at level i+2."""
        names = tuple(tuple(level) for level in level_names)
        links = tuple(
            tuple((child, int(parent)) for child, parent in enumerate(parents))
            for parents in parent_maps
        )
        return cls(level_names=names, links=links)

    @property
    def K(self) -> int:
        return len(self.level_names)

    @property
    def level_sizes(self) -> Tuple[int, ...]:
        return tuple(len(level) for level in self.level_names)

    @cached_property
    def _parent_tables(self) -> Tuple[np.ndarray, ...]:
        tables = []
        for k, pairs in enumerate(self.links, start=2):
            table = np.full(self.level_sizes[k - 1], -1, dtype=np.int64)
            for child, parent in pairs:
                table[child] = parent
            table.setflags(write=False)
            tables.append(table)
        return tuple(tables)

    @cached_property
    def _name_index(self) -> Tuple[Dict[str, int], ...]:
        return tuple(
            {name: idx for idx, name in enumerate(level)} for level in self.level_names
        )

    @cached_property
    def chain_table(self) -> np.ndarray:
        """[C_K x K] array; row i is the label chain of finest category i."""
        table = np.empty((self.level_sizes[-1], self.K), dtype=np.int64)
        table[:, self.K - 1] = np.arange(self.level_sizes[-1])
        for k in range(self.K - 1, 0, -1):
            table[:, k - 1] = self._parent_tables[k - 1][table[:, k]]
        table.setflags(write=False)
        return table

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.K:
            raise TaxonomyError(f"Level {level} out of range 1..{self.K}")

    def _check_index(self, level: int, idx: int) -> None:
        self._check_level(level)
        size = self.level_sizes[level - 1]
        if not 0 <= idx < size:
            raise TaxonomyError(
                f"Category index {idx} out of range for level {level} (size {size})"
            )

    def parent(self, level: int, idx: int) -> int:
        """Parent (at level - 1) of category `idx` at `level` (level >= 2)."""
        self._check_index(level, idx)
        if level == 1:
            raise TaxonomyError("Level 1 categories have no parent")
        return int(self._parent_tables[level - 2][idx])

    def parent_table(self, level: int) -> np.ndarray:
        """Read-only array of the level-(level - 1) parent of each category."""
        self._check_level(level)
        if level == 1:
            raise TaxonomyError("Level 1 categories have no parent")
        return self._parent_tables[level - 2]

    def name(self, level: int, idx: int) -> str:
        self._check_index(level, idx)
        return self.level_names[level - 1][idx]

    def index_of(self, level: int, name: str) -> int:
        self._check_level(level)
        try:
            return self._name_index[level - 1][name]
        except KeyError:
            raise TaxonomyError(f"Unknown category {name!r} at level {level}") from None

    def has_name(self, level: int, name: str) -> bool:
        self._check_level(level)
        return name in self._name_index[level - 1]


@dataclass(frozen=True)
class LabelChain:
    """One category index per level, coarse to fine."""

    indices: Tuple[int, ...]

    def is_consistent(self, tax: Taxonomy) -> bool:
        if len(self.indices) != tax.K:
            return False
        for k in range(2, tax.K + 1):
            if tax.parent(k, self.indices[k - 1]) != self.indices[k - 2]:
                return False
        return True

    def one_hot(self, tax: Taxonomy, level: int) -> np.ndarray:
        vector = np.zeros(tax.level_sizes[level - 1])
        vector[self.indices[level - 1]] = 1.0
        return vector


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violation: Optional[str] = None
    detail: str = ""

    def __str__(self) -> str:
        return "ok" if self.ok else f"{self.violation}: {self.detail}"


OK = ValidationReport(ok=True)


def validate(tax: Taxonomy) -> ValidationReport:
    """Returns the first violated invariant, or an ok report."""
    if tax.K < 1:
        return ValidationReport(False, "no levels", "a taxonomy needs at least 1 level")
    if len(tax.links) != tax.K - 1:
        return ValidationReport(
            False,
            "level count mismatch",
            f"{tax.K} levels need {tax.K - 1} parent maps, got {len(tax.links)}",
        )
    for k, level in enumerate(tax.level_names, start=1):
        if not level:
            return ValidationReport(
                False, "empty level", f"level {k} has no categories"
            )
        seen = set()
        for name in level:
            if name in seen:
                return ValidationReport(
                    False, "duplicate name", f"{name!r} repeats at level {k}"
                )
            seen.add(name)
    for k, pairs in enumerate(tax.links, start=2):
        child_count = tax.level_sizes[k - 1]
        parent_count = tax.level_sizes[k - 2]
        parents_of: Dict[int, int] = {}
        for child, parent in pairs:
            if not (0 <= child < child_count and 0 <= parent < parent_count):
                return ValidationReport(
                    False,
                    "index out of range",
                    f"link {child}->{parent} between levels {k} and {k - 1}",
                )
            if child in parents_of and parents_of[child] != parent:
                return ValidationReport(
                    False,
                    "multiple parents",
                    f"{tax.level_names[k - 1][child]!r} at level {k} has parents "
                    f"{parents_of[child]} and {parent}",
                )
            parents_of[child] = parent
        for child in range(child_count):
            if child not in parents_of:
                return ValidationReport(
                    False,
                    "missing parent",
                    f"{tax.level_names[k - 1][child]!r} at level {k} has no parent",
                )
        used = set(parents_of.values())
        for parent in range(parent_count):
            if parent not in used:
                return ValidationReport(
                    False,
                    "empty internal node",
                    f"{tax.level_names[k - 2][parent]!r} at level {k - 1} "
                    f"has no children",
                )
    return OK


def require_valid(tax: Taxonomy) -> Taxonomy:
    report = validate(tax)
    if not report.ok:
        raise TaxonomyError(f"Invalid taxonomy ({report})")
    return tax


def parse_taxonomy(text: str) -> Taxonomy:
    """Parses taxonomy-file contents into a validated Taxonomy."""
    levels: Optional[int] = None
    names: List[Dict[str, int]] = []
    parents: List[Dict[int, int]] = []
    data_lines = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if levels is None:
            key, sep, value = line.partition("=")
            if not sep or key.strip() != "levels":
                raise TaxonomyError(
                    f"Line {line_no}: expected header 'levels=K', got {raw!r}"
                )
            try:
                levels = int(value.strip())
            except ValueError:
                raise TaxonomyError(
                    f"Line {line_no}: level count {value.strip()!r} is not an integer"
                ) from None
            if levels < 1:
                raise TaxonomyError(
                    f"Line {line_no}: levels must be >= 1, got {levels}"
                )
            names = [{} for _ in range(levels)]
            parents = [{} for _ in range(levels - 1)]
            continue

        fields = [field.strip() for field in line.split(",")]
        if len(fields) != levels:
            raise TaxonomyError(
                f"Line {line_no}: expected {levels} comma-separated names, "
                f"got {len(fields)}"
            )
        if any(not field for field in fields):
            raise TaxonomyError(f"Line {line_no}: empty category name")
        if fields[-1] in names[-1]:
            raise TaxonomyError(
                f"Line {line_no}: duplicate finest category {fields[-1]!r}"
            )
        data_lines += 1

        previous = -1
        for k, field in enumerate(fields):
            idx = names[k].setdefault(field, len(names[k]))
            if k > 0:
                known = parents[k - 1].setdefault(idx, previous)
                if known != previous:
                    old = _name_at(names[k - 1], known)
                    raise TaxonomyError(
                        f"Line {line_no}: inconsistent parent for {field!r} "
                        f"(listed under {old!r} and {fields[k - 1]!r})"
                    )
            previous = idx

    if levels is None or data_lines == 0:
        raise TaxonomyError("Empty taxonomy: no header or no category lines")

    level_names = [tuple(level) for level in names]
    parent_maps = [
        [level_parents[child] for child in range(len(names[k + 1]))]
        for k, level_parents in enumerate(parents)
    ]
    tax = Taxonomy.from_parent_maps(level_names, parent_maps)
    logger.debug("Parsed taxonomy with level sizes %s", tax.level_sizes)
    return require_valid(tax)


def _name_at(index: Dict[str, int], idx: int) -> str:
    for name, value in index.items():
        if value == idx:
            return name
    return str(idx)


def serialize_taxonomy(tax: Taxonomy) -> str:
    """Writes the file format; one line per finest category in index order."""
    require_valid(tax)
    lines = [f"levels={tax.K}"]
    for chain in tax.chain_table:
        lines.append(
            ",".join(tax.level_names[k][int(idx)] for k, idx in enumerate(chain))
        )
    return "\n".join(lines) + "\n"


def load_taxonomy(path: str) -> Taxonomy:
    return parse_taxonomy(read_text(path))


def ancestor(tax: Taxonomy, level: int, idx: int, target_level: int) -> int:
    """Follows parent maps from `level` up to `target_level` (<= level)."""
    tax._check_index(level, idx)
    tax._check_level(target_level)
    if target_level > level:
        raise TaxonomyError(
            f"Target level {target_level} is finer than source level {level}"
        )
    current = idx
    for k in range(level, target_level, -1):
        current = tax.parent(k, current)
    return current


def label_chain(tax: Taxonomy, fine_idx: int) -> LabelChain:
    tax._check_index(tax.K, fine_idx)
    return LabelChain(tuple(int(i) for i in tax.chain_table[fine_idx]))


def chain_matrix(tax: Taxonomy, fine_labels: np.ndarray) -> np.ndarray:
    """Label chains for a batch of finest labels, as an [m x K] index array."""
    labels = np.asarray(fine_labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= tax.level_sizes[-1]):
        raise TaxonomyError(
            f"Finest label out of range 0..{tax.level_sizes[-1] - 1}"
        )
    return tax.chain_table[labels]


def balanced_taxonomy(level_sizes: Sequence[int]) -> Taxonomy:
    """
    Builds an equal fan-out hierarchy with names "L{k}_{i}".
    Every C_{k+1} must be a multiple of C_k.
    """
    sizes = list(level_sizes)
    if not sizes or any(size < 1 for size in sizes):
        raise TaxonomyError(f"Level sizes must be positive, got {sizes}")
    for coarse, fine in zip(sizes, sizes[1:]):
        if fine % coarse != 0:
            raise TaxonomyError(
                f"Balanced tree needs each level size to divide the next: "
                f"{fine} is not divisible by {coarse}"
            )
    level_names = [
        [f"L{k}_{i}" for i in range(size)] for k, size in enumerate(sizes, start=1)
    ]
    parent_maps = [
        [child // (fine // coarse) for child in range(fine)]
        for coarse, fine in zip(sizes, sizes[1:])
    ]
    return require_valid(Taxonomy.from_parent_maps(level_names, parent_maps))
