import os

import numpy as np
import pytest

from shared.errors import TaxonomyError
from shared.taxonomy import (
    LabelChain,
    Taxonomy,
    ancestor,
    balanced_taxonomy,
    chain_matrix,
    label_chain,
    load_taxonomy,
    parse_taxonomy,
    serialize_taxonomy,
    validate,
)

TAXONOMY_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "taxonomies")

BIRDS = """levels=3
Passeriformes,Icteridae,Brewer Blackbird
Passeriformes,Icteridae,Red winged Blackbird
Passeriformes,Corvidae,Blue Jay
Charadriiformes,Laridae,California Gull
"""


def test_parse_assigns_indices_by_first_appearance():
    tax = parse_taxonomy(BIRDS)
    assert tax.level_sizes == (2, 3, 4)
    assert tax.index_of(1, "Charadriiformes") == 1
    assert tax.index_of(2, "Corvidae") == 1
    assert tax.parent(3, tax.index_of(3, "Blue Jay")) == tax.index_of(2, "Corvidae")


def test_parse_skips_comments_and_blank_lines():
    text = "# birds\n\nlevels=2\n# order,species\nA,a1\n\nB,b1\n"
    tax = parse_taxonomy(text)
    assert tax.level_sizes == (2, 2)


def test_parse_single_level():
    tax = parse_taxonomy("levels=1\ncat\ndog\n")
    assert tax.K == 1
    assert label_chain(tax, 1).indices == (1,)


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "Empty taxonomy"),
        ("levels=2\n", "Empty taxonomy"),
        ("level=2\nA,a\n", "header"),
        ("levels=two\nA,a\n", "not an integer"),
        ("levels=2\nA,a,extra\n", "expected 2"),
        ("levels=2\nA,\n", "empty category name"),
        ("levels=2\nA,a\nB,a\n", "duplicate finest"),
    ],
)
def test_parse_errors(text, message):
    with pytest.raises(TaxonomyError, match=message):
        parse_taxonomy(text)


def test_parse_inconsistent_parent_names_both_parents():
    text = "levels=3\nA,fam,x\nB,fam,y\n"
    with pytest.raises(TaxonomyError) as info:
        parse_taxonomy(text)
    assert "'A'" in str(info.value) and "'B'" in str(info.value)


def test_validate_ok(toy_tax):
    report = validate(toy_tax)
    assert report.ok
    assert str(report) == "ok"


@pytest.mark.parametrize(
    "tax, violation",
    [
        (Taxonomy((), ()), "no levels"),
        (Taxonomy((("a",), ("b",)), ()), "level count mismatch"),
        (Taxonomy((("a",), ()), ((),)), "empty level"),
        (Taxonomy((("a", "a"),), ()), "duplicate name"),
        (Taxonomy((("a",), ("b",)), (((0, 3),),)), "index out of range"),
        (Taxonomy((("a", "b"), ("c",)), (((0, 0), (0, 1)),)), "multiple parents"),
        (Taxonomy((("a",), ("b", "c")), (((0, 0),),)), "missing parent"),
        (Taxonomy((("a", "b"), ("c",)), (((0, 0),),)), "empty internal node"),
    ],
)
def test_validate_reports_violation(tax, violation):
    report = validate(tax)
    assert not report.ok
    assert report.violation == violation


def test_ancestor_and_chains(uneven_tax):
    assert ancestor(uneven_tax, 3, 3, 1) == 1
    assert ancestor(uneven_tax, 3, 1, 2) == 1
    assert ancestor(uneven_tax, 2, 2, 2) == 2
    assert label_chain(uneven_tax, 1).indices == (0, 1, 1)
    assert LabelChain((1, 2, 3)).is_consistent(uneven_tax)
    assert not LabelChain((0, 2, 3)).is_consistent(uneven_tax)
    np.testing.assert_array_equal(
        chain_matrix(uneven_tax, np.array([0, 3])), [[0, 0, 0], [1, 2, 3]]
    )


def test_ancestor_composes_across_levels(uneven_tax):
    for idx in range(uneven_tax.level_sizes[2]):
        via_middle = ancestor(uneven_tax, 2, ancestor(uneven_tax, 3, idx, 2), 1)
        assert ancestor(uneven_tax, 3, idx, 1) == via_middle
    tax = load_taxonomy(os.path.join(TAXONOMY_DIR, "cub_like.txt"))
    for idx in range(tax.level_sizes[2]):
        for middle in (1, 2, 3):
            step = ancestor(tax, middle, ancestor(tax, 3, idx, middle), 1)
            assert step == ancestor(tax, 3, idx, 1)


def test_file_lines_define_every_leaf_chain():
    path = os.path.join(TAXONOMY_DIR, "cub_like.txt")
    tax = load_taxonomy(path)
    with open(path, "r", encoding="utf-8") as f:
        rows = [line.strip().split(",") for line in f.read().splitlines()[1:]]
    assert len(rows) == tax.level_sizes[-1]
    for names in rows:
        leaf = tax.index_of(3, names[2])
        chain = label_chain(tax, leaf).indices
        assert [tax.name(k + 1, chain[k]) for k in range(3)] == names
        assert tax.name(1, ancestor(tax, 3, leaf, 1)) == names[0]
        assert tax.name(2, ancestor(tax, 3, leaf, 2)) == names[1]


def test_ancestor_rejects_finer_target(uneven_tax):
    with pytest.raises(TaxonomyError, match="finer"):
        ancestor(uneven_tax, 2, 0, 3)


def test_parent_of_level_one_is_an_error(toy_tax):
    with pytest.raises(TaxonomyError):
        toy_tax.parent(1, 0)
    with pytest.raises(TaxonomyError, match="out of range"):
        toy_tax.parent(2, 4)


def test_one_hot(toy_tax):
    vector = label_chain(toy_tax, 3).one_hot(toy_tax, 1)
    np.testing.assert_array_equal(vector, [0.0, 1.0])


def test_balanced_taxonomy():
    tax = balanced_taxonomy([4, 16])
    assert tax.level_sizes == (4, 16)
    assert tax.parent(2, 5) == 1
    assert tax.name(2, 5) == "L2_5"


def test_balanced_taxonomy_needs_divisible_sizes():
    with pytest.raises(TaxonomyError, match="not divisible"):
        balanced_taxonomy([4, 6])


def test_serialize_round_trip():
    assert serialize_taxonomy(parse_taxonomy(BIRDS)) == BIRDS


@pytest.mark.parametrize(
    "filename, shape",
    [
        ("cub_like.txt", (13, 38, 200)),
        ("aircraft_like.txt", (30, 70, 100)),
        ("cars_like.txt", (9, 196)),
    ],
)
def test_sample_taxonomies_round_trip(filename, shape):
    path = os.path.join(TAXONOMY_DIR, filename)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    tax = load_taxonomy(path)
    assert tax.level_sizes == shape
    assert validate(tax).ok
    assert serialize_taxonomy(tax) == text


def test_load_missing_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.txt")
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        load_taxonomy(missing)
