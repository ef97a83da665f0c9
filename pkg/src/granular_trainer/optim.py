import logging
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from granular_trainer.config import TrainConfig
from granular_trainer.models import ParamSet
from shared.errors import NonFiniteError, ShapeError
from shared.tensor_core import Gradients

logger = logging.getLogger(__name__)

Velocity = Dict[str, np.ndarray]


def grads_by_name(params: ParamSet, grads: Gradients) -> Dict[str, np.ndarray]:
    return {name: grads[params[name]] for name in params}


def learning_rate(params: ParamSet, name: str, cfg: TrainConfig) -> float:
    return cfg.lr_heads if params.info[name].kind == "head" else cfg.lr_backbone


def sgd_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    cfg: TrainConfig,
    state: Optional[Velocity] = None,
) -> Tuple[ParamSet, Velocity]:
    """
    One momentum SGD update:

        v <- momentum * v + g + weight_decay * p   (no decay term for biases)
        p <- p - lr * v

    `lr` is lr_heads for head parameters and lr_backbone otherwise. Returns the
    new parameters and velocities; the inputs are left untouched.
    """
    velocity: Velocity = dict(state or {})
    updates: Dict[str, np.ndarray] = {}
    for name in params:
        p = params[name].data
        if name not in grads:
            raise ShapeError(f"Missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(
                f"Gradient for {name!r} has shape {g.shape}, expected {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name!r}")

        v = velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        if params.info[name].is_bias:
            v = cfg.momentum * v + g
        else:
            v = cfg.momentum * v + g + cfg.weight_decay * p
        velocity[name] = v
        updates[name] = p - learning_rate(params, name, cfg) * v
    return params.replace(updates), velocity
