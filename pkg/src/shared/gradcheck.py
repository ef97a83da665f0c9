from typing import Callable

import numpy as np

DEFAULT_STEP = 1.0e-5


def central_difference(
    fun: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    """
    Numerical gradient of a scalar function at `x` by central differences,
    one coordinate at a time. Returns an array shaped like `x`.
    """
    x = np.array(x, dtype=np.float64)
    grad_n = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad_n.reshape(-1)

    for i in range(flat.size):
        original = flat[i]

        flat[i] = original + h
        f_plus = fun(x)
        flat[i] = original - h
        f_minus = fun(x)
        flat[i] = original

        out[i] = 0.5 * (f_plus - f_minus) / h

    return grad_n


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6
) -> float:
    """||a - n|| / max(||a|| + ||n||, floor), norms over the whole array."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale
