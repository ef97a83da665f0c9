"""
Training configuration and its key=value file format.

    # comments and blank lines are ignored
    epochs=30
    lr_heads=0.05
    loss_weights=1.0,0.5

Keys are `TrainConfig` field names. Precedence: defaults < file < overrides.
"""

import logging
import math
from typing import Any, Dict, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from granular_trainer.models import LossWeights
from shared.errors import ConfigError
from shared.utils import parse_float_list, parse_key_value_config

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    lr_backbone: float = 0.01
    lr_heads: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_weights: Optional[Tuple[float, ...]] = None
    seed: int = 0
    eval_every: int = Field(1, ge=1)
    standardize: bool = True
    stop_gradient: bool = True
    check_finite: bool = False

    @field_validator("lr_backbone", "lr_heads")
    @classmethod
    def _check_lr(cls, value: float) -> float:
        # 0 is accepted so a run can freeze every parameter.
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"learning rate must be finite and >= 0, got {value}")
        return value

    @field_validator("momentum")
    @classmethod
    def _check_momentum(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {value}")
        return value

    @field_validator("loss_weights")
    @classmethod
    def _check_loss_weights(
        cls, value: Optional[Tuple[float, ...]]
    ) -> Optional[Tuple[float, ...]]:
        if value is not None:
            LossWeights(values=value)
        return value

    @field_validator("weight_decay")
    @classmethod
    def _check_weight_decay(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"weight_decay must be >= 0, got {value}")
        return value

    def weights_for(self, K: int) -> Tuple[float, ...]:
        """Per-level loss weights, all ones when unset."""
        if self.loss_weights is None:
            return (1.0,) * K
        if len(self.loss_weights) != K:
            raise ConfigError(
                f"{len(self.loss_weights)} loss weights configured for K={K} levels"
            )
        return self.loss_weights


_BOOL_VALUES = {
    "true": True,
    "1": True,
    "yes": True,
    "false": False,
    "0": False,
    "no": False,
}


def _coerce(key: str, raw: str) -> Any:
    if key == "loss_weights":
        return parse_float_list(raw)
    if key in ("standardize", "stop_gradient", "check_finite"):
        if raw.lower() not in _BOOL_VALUES:
            raise ConfigError(f"{key}: expected true/false, got {raw!r}")
        return _BOOL_VALUES[raw.lower()]
    return raw


def load_train_config(
    text: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None
) -> TrainConfig:
    """Builds a TrainConfig from optional file text plus overrides; None is skipped."""
    values: Dict[str, Any] = {}
    if text:
        for key, raw in parse_key_value_config(text).items():
            if key not in TrainConfig.model_fields:
                raise ConfigError(f"Unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid training config: {e}") from e
