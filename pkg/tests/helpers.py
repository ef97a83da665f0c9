import numpy as np

from granular_trainer.models import ParamSet


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bit-exact equality of two parameter sets."""
    return a.names() == b.names() and all(
        np.array_equal(a[name].data, b[name].data) for name in a
    )
