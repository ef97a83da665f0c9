import numpy as np
import pytest

from granular_trainer.config import TrainConfig
from granular_trainer.models import ModelSpec, Variant
from shared.data import SynthConfig, gen_synthetic
from shared.taxonomy import Taxonomy, balanced_taxonomy


@pytest.fixture
def toy_tax():
    """Balanced [2, 4] hierarchy: L1_0 -> {L2_0, L2_1}, L1_1 -> {L2_2, L2_3}."""
    return balanced_taxonomy([2, 4])


@pytest.fixture
def uneven_tax():
    """Three levels of sizes (2, 3, 4) with uneven fan-out."""
    return Taxonomy.from_parent_maps(
        [("a", "b"), ("a1", "a2", "b1"), ("x", "y", "z", "w")],
        [[0, 0, 1], [0, 1, 2, 2]],
    )


@pytest.fixture
def small_synth():
    return SynthConfig(
        level_sizes=(2, 4),
        train_per_class=10,
        test_per_class=5,
        input_dim=6,
        seed=3,
    )


@pytest.fixture
def small_data(small_synth):
    return gen_synthetic(small_synth)


@pytest.fixture
def make_spec():
    def factory(variant=Variant.OURS, level_sizes=(2, 4), input_dim=6, **kwargs):
        kwargs.setdefault("hidden_widths", (8,))
        kwargs.setdefault("feature_dim", 8)
        return ModelSpec(
            variant=variant, input_dim=input_dim, level_sizes=level_sizes, **kwargs
        )

    return factory


@pytest.fixture
def quick_cfg():
    return TrainConfig(epochs=3, batch_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
