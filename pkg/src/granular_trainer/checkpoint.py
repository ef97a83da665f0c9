"""
Model checkpoints: one `.npz` archive holding every parameter under its
name, the model spec as JSON under `__meta__`, and optionally the input
standardizer statistics.
"""

import json
import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError
from sklearn.preprocessing import StandardScaler

from granular_trainer.models import ModelSpec, ParamSet, init_params
from shared.data import scaler_from_stats
from shared.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

FORMAT_NAME = "granular-checkpoint"
FORMAT_VERSION = 1
META_KEY = "__meta__"
SCALER_MEAN_KEY = "__scaler_mean__"
SCALER_SCALE_KEY = "__scaler_scale__"


def save_checkpoint(
    path: str, params: ParamSet, scaler: Optional[StandardScaler] = None
) -> None:
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": params.spec.model_dump(mode="json"),
    }
    arrays: Dict[str, np.ndarray] = {
        META_KEY: np.array(json.dumps(meta, sort_keys=True))
    }
    for name in params:
        arrays[name] = params[name].data
    if scaler is not None:
        arrays[SCALER_MEAN_KEY] = np.asarray(scaler.mean_, dtype=np.float64)
        arrays[SCALER_SCALE_KEY] = np.asarray(scaler.scale_, dtype=np.float64)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # A file handle keeps numpy from appending its own suffix.
    with open(path, "wb") as f:
        np.savez(f, **arrays)  # type: ignore[arg-type]
    logger.info("Saved checkpoint to %s (%d tensors)", path, len(params))


def load_checkpoint(path: str) -> Tuple[ParamSet, Optional[StandardScaler]]:
    """Reads a checkpoint written by `save_checkpoint`; values are restored exactly."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataError(f"{path} is not a checkpoint archive: {e}") from e

    with archive:
        if META_KEY not in archive.files:
            raise DataError(f"{path}: missing {META_KEY} entry")
        meta = json.loads(str(archive[META_KEY]))
        if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
            raise DataError(
                f"{path}: unsupported checkpoint format "
                f"{meta.get('format')!r} v{meta.get('version')!r}"
            )
        try:
            spec = ModelSpec.model_validate(meta["spec"])
        except ValidationError as e:
            raise ConfigError(f"{path}: invalid model spec: {e}") from e

        template = init_params(spec)
        missing = [name for name in template if name not in archive.files]
        if missing:
            raise DataError(f"{path}: missing parameters {missing}")
        params = template.replace({name: archive[name] for name in template})

        scaler = None
        if SCALER_MEAN_KEY in archive.files:
            scaler = scaler_from_stats(
                archive[SCALER_MEAN_KEY], archive[SCALER_SCALE_KEY]
            )

    logger.debug("Loaded %s checkpoint from %s", spec.variant.value, path)
    return params, scaler
