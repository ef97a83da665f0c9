"""
Backbone F, per-level heads G_1..G_K and the four head topologies.

    vanilla_single  one backbone, every head reads the full feature f
    vanilla_multi   one backbone per level, head k reads its own backbone's f
    ours_single     f is split into K equal segments, head k reads segment k
    ours            head k reads concat(f_k, sg(f_{k+1}), ..., sg(f_K)), where
                    sg is the stop-gradient controller

Segment 1 belongs to the coarsest level, segment K to the finest.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from shared.errors import ConfigError, ShapeError
from shared.tensor_core import Tape, Tensor

logger = logging.getLogger(__name__)

MULTI_LABEL_FEATURE_DIM = 600
SINGLE_LABEL_FEATURE_DIM = 512


class Variant(str, Enum):
    VANILLA_SINGLE = "vanilla_single"
    VANILLA_MULTI = "vanilla_multi"
    OURS_SINGLE = "ours_single"
    OURS = "ours"


class ModelSpec(BaseModel):
    """Architecture of one model. Validated on construction."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    variant: Variant = Variant.OURS
    input_dim: int = Field(ge=1)
    hidden_widths: Tuple[int, ...] = (128, 128)
    feature_dim: int = Field(ge=1)
    level_sizes: Tuple[int, ...]
    identity_backbone: bool = False
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _default_feature_dim(cls, data: Any) -> Any:
        # D defaults to 600 for multi-level models and 512 for a single level.
        if isinstance(data, dict) and data.get("feature_dim") is None:
            data = dict(data)
            if data.get("identity_backbone"):
                data["feature_dim"] = data.get("input_dim")
            elif len(data.get("level_sizes") or ()) > 1:
                data["feature_dim"] = MULTI_LABEL_FEATURE_DIM
            else:
                data["feature_dim"] = SINGLE_LABEL_FEATURE_DIM
        return data

    @field_validator("level_sizes")
    @classmethod
    def _check_levels(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(size < 1 for size in value):
            raise ValueError(f"level_sizes must be non-empty and positive, got {value}")
        return value

    @field_validator("hidden_widths")
    @classmethod
    def _check_hidden(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(width < 1 for width in value):
            raise ValueError(f"hidden widths must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelSpec":
        if self.identity_backbone and self.feature_dim != self.input_dim:
            raise ValueError(
                f"identity backbone needs feature_dim == input_dim "
                f"({self.feature_dim} != {self.input_dim})"
            )
        if self.variant in (Variant.OURS, Variant.OURS_SINGLE):
            if self.feature_dim % self.K != 0:
                raise ValueError(
                    f"{self.variant.value}: feature_dim {self.feature_dim} is not "
                    f"divisible by K={self.K}"
                )
        return self

    @property
    def K(self) -> int:
        return len(self.level_sizes)

    @property
    def backbone_count(self) -> int:
        return self.K if self.variant == Variant.VANILLA_MULTI else 1

    @property
    def segment_width(self) -> int:
        return self.feature_dim // self.K

    def head_input_width(self, level: int) -> int:
        if self.variant == Variant.OURS_SINGLE:
            return self.segment_width
        if self.variant == Variant.OURS:
            return (self.K - level + 1) * self.segment_width
        return self.feature_dim

    def backbone_dims(self) -> List[int]:
        if self.identity_backbone:
            return [self.input_dim]
        return [self.input_dim, *self.hidden_widths, self.feature_dim]


class LossWeights(BaseModel):
    """Per-level loss weights w_1..w_K (alpha, beta for two levels)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    values: Tuple[float, ...]

    @field_validator("values")
    @classmethod
    def _check_values(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value:
            raise ValueError("at least one loss weight is required")
        if any(not math.isfinite(w) or w < 0 for w in value):
            raise ValueError(f"loss weights must be finite and >= 0, got {value}")
        if all(w == 0 for w in value):
            raise ValueError("loss weights must not all be zero")
        return value

    @classmethod
    def uniform(cls, K: int) -> "LossWeights":
        return cls(values=(1.0,) * K)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ParamInfo:
    kind: str  # "backbone" | "head"
    is_bias: bool
    level: Optional[int] = None
    backbone: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Named trainable tensors of one model, in a fixed order."""

    spec: ModelSpec
    tensors: Mapping[str, Tensor]
    info: Mapping[str, ParamInfo]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def watch(self, tape: Tape) -> None:
        for tensor in self.tensors.values():
            tape.watch(tensor)

    def replace(self, values: Mapping[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with some tensors swapped for new values."""
        tensors = dict(self.tensors)
        for name, value in values.items():
            if name not in tensors:
                raise KeyError(f"Unknown parameter {name!r}")
            if np.shape(value) != tensors[name].shape:
                raise ShapeError(
                    f"{name}: new shape {np.shape(value)} != {tensors[name].shape}"
                )
            tensors[name] = Tensor(value, name=name)
        return ParamSet(self.spec, tensors, self.info)

    def backbone_layers(self, backbone: int = 0) -> List[Tuple[Tensor, Tensor]]:
        layers = []
        i = 0
        while f"backbone{backbone}.layer{i}.weight" in self.tensors:
            layers.append(
                (
                    self.tensors[f"backbone{backbone}.layer{i}.weight"],
                    self.tensors[f"backbone{backbone}.layer{i}.bias"],
                )
            )
            i += 1
        return layers

    def head(self, level: int) -> Tuple[Tensor, Tensor]:
        return self.tensors[f"head{level}.weight"], self.tensors[f"head{level}.bias"]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(spec: ModelSpec) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    tensors: Dict[str, Tensor] = {}
    info: Dict[str, ParamInfo] = {}

    dims = spec.backbone_dims()
    for b in range(spec.backbone_count):
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            prefix = f"backbone{b}.layer{i}"
            tensors[f"{prefix}.weight"] = Tensor(
                _glorot(rng, fan_in, fan_out), name=f"{prefix}.weight"
            )
            tensors[f"{prefix}.bias"] = Tensor(np.zeros(fan_out), name=f"{prefix}.bias")
            info[f"{prefix}.weight"] = ParamInfo("backbone", False, backbone=b)
            info[f"{prefix}.bias"] = ParamInfo("backbone", True, backbone=b)

    for k in range(1, spec.K + 1):
        fan_in, fan_out = spec.head_input_width(k), spec.level_sizes[k - 1]
        tensors[f"head{k}.weight"] = Tensor(
            _glorot(rng, fan_in, fan_out), name=f"head{k}.weight"
        )
        tensors[f"head{k}.bias"] = Tensor(np.zeros(fan_out), name=f"head{k}.bias")
        info[f"head{k}.weight"] = ParamInfo("head", False, level=k)
        info[f"head{k}.bias"] = ParamInfo("head", True, level=k)

    logger.debug(
        "Initialized %s with %d parameter tensors", spec.variant.value, len(tensors)
    )
    return ParamSet(spec, tensors, info)


def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backbone_forward(
    params: ParamSet, x: Union[Tensor, np.ndarray], tape: Tape, backbone: int = 0
) -> Tensor:
    """MLP forward: (linear -> relu) per hidden layer, then a final linear to D."""
    x = _as_tensor(x)
    spec = params.spec
    if len(x.shape) != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"Input shape {x.shape} does not match input_dim {spec.input_dim}"
        )
    layers = params.backbone_layers(backbone)
    h = x
    for i, (weight, bias) in enumerate(layers):
        h = tape.add_bias(tape.matmul(h, weight), bias)
        if i < len(layers) - 1:
            h = tape.relu(h)
    return h


def _head_inputs(
    params: ParamSet, x: Tensor, tape: Tape, stop_gradient: bool
) -> Tuple[List[Tensor], List[Tensor]]:
    spec = params.spec
    if spec.variant == Variant.VANILLA_MULTI:
        features = [backbone_forward(params, x, tape, b) for b in range(spec.K)]
        return features, features

    f = backbone_forward(params, x, tape)
    if spec.variant == Variant.VANILLA_SINGLE:
        return [f], [f] * spec.K

    segments = tape.split(f, spec.K)
    if spec.variant == Variant.OURS_SINGLE:
        return [f], segments
    if spec.variant != Variant.OURS:
        raise ConfigError(f"Unknown variant {spec.variant!r}")

    inputs = []
    for k in range(spec.K):
        finer = segments[k + 1 :]
        if stop_gradient:
            finer = [tape.stop_gradient(segment) for segment in finer]
        parts = [segments[k], *finer]
        inputs.append(parts[0] if len(parts) == 1 else tape.concat(parts))
    return [f], inputs


def features_and_logits(
    params: ParamSet,
    x: Union[Tensor, np.ndarray],
    tape: Tape,
    stop_gradient: bool = True,
) -> Tuple[List[Tensor], List[Tensor]]:
    """Backbone outputs (one per backbone) and the logits [y_1..y_K]."""
    x = _as_tensor(x)
    params.watch(tape)
    features, inputs = _head_inputs(params, x, tape, stop_gradient)
    logits = []
    for k, inp in enumerate(inputs, start=1):
        weight, bias = params.head(k)
        logits.append(tape.add_bias(tape.matmul(inp, weight), bias))
    return features, logits


def forward(
    params: ParamSet,
    x: Union[Tensor, np.ndarray],
    tape: Tape,
    stop_gradient: bool = True,
) -> List[Tensor]:
    """
    Logits [y_1..y_K] for a batch. `stop_gradient=False` keeps the ours
    topology but lets finer segments receive gradients from coarser heads.
    """
    return features_and_logits(params, x, tape, stop_gradient)[1]


def total_loss(
    tape: Tape,
    logits: Sequence[Tensor],
    chains: np.ndarray,
    weights: Union[LossWeights, Sequence[float]],
) -> Tensor:
    """sum_k w_k * CE(y_k, chains[:, k])."""
    values = weights.values if isinstance(weights, LossWeights) else tuple(weights)
    chains = np.asarray(chains, dtype=np.int64)
    if len(values) != len(logits):
        raise ShapeError(f"{len(values)} loss weights for {len(logits)} levels")
    if chains.ndim != 2 or chains.shape[1] != len(logits):
        raise ShapeError(
            f"Label chains of shape {chains.shape} for {len(logits)} levels"
        )
    terms = [
        tape.softmax_cross_entropy(level_logits, chains[:, k])
        for k, level_logits in enumerate(logits)
    ]
    return tape.weighted_sum(terms, values)
