import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.encoders import EncoderParams
from app.errors import ConfigError, ShapeError
from app.tensor import Tensor, add, as_tensor, matmul, scale


logger = logging.getLogger(__name__)

LoraTarget = Literal["both", "vision", "text"]


class LoraConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rank: int = Field(default=4, ge=1, description="Adapter rank r")
    scaling: float = Field(default=15.0, description="Scaling s; the update is (s/r) B A")
    target: LoraTarget = "both"
    layers: tuple[int, ...] | None = Field(
        default=None, description="Layer indices to adapt; None adapts every linear layer"
    )

    @model_validator(mode="after")
    def _validate_scaling(self) -> "LoraConfig":
        if not math.isfinite(self.scaling):
            raise ValueError("scaling must be finite")
        return self

    @property
    def step_scale(self) -> float:
        return self.scaling / self.rank

    def adapts(self, tower: Literal["vision", "text"]) -> bool:
        return self.target in {"both", tower}


@dataclass
class LoraAdapter:
    """Low-rank pair for one linear layer: A is r x cols, B is rows x r."""

    A: Tensor
    B: Tensor
    layer_id: str

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])


def _draw_a(seed: int, index: int, rank: int, cols: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    bound = math.sqrt(6.0 / (rank + cols))
    return rng.uniform(-bound, bound, size=(rank, cols))


def effective_weight(weight: Tensor | np.ndarray, adapter: LoraAdapter, cfg: LoraConfig) -> Tensor:
    """W' = W + (s/r) B A. W is never mutated."""
    weight = as_tensor(weight)
    rows, cols = weight.shape
    if adapter.B.shape != (rows, adapter.rank) or adapter.A.shape != (adapter.rank, cols):
        raise ShapeError(
            f"adapter {adapter.layer_id} ({adapter.B.shape}, {adapter.A.shape}) "
            f"does not fit weight {weight.shape}"
        )
    return add(weight, scale(matmul(adapter.B, adapter.A), cfg.step_scale))


class AdapterSet:
    """Adapters attached to one encoder, keyed by layer index."""

    def __init__(self, name: str, adapters: dict[int, LoraAdapter], cfg: LoraConfig, seed: int):
        self.name = name
        self.adapters = adapters
        self.cfg = cfg
        self.seed = seed

    def weight_for(self, index: int, weight: Tensor) -> Tensor:
        adapter = self.adapters.get(index)
        if adapter is None:
            return weight
        return effective_weight(weight, adapter, self.cfg)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for index in sorted(self.adapters):
            params.extend([self.adapters[index].A, self.adapters[index].B])
        return params

    def reset(self) -> None:
        """B back to zero, A redrawn from the attach seed; updates happen in place."""
        for index, adapter in self.adapters.items():
            adapter.A.data[...] = _draw_a(self.seed, index, adapter.rank, adapter.A.shape[1])
            adapter.B.data[...] = 0.0
            adapter.A.grad = None
            adapter.B.grad = None

    def is_identity(self) -> bool:
        return all(not np.any(adapter.B.data) for adapter in self.adapters.values())

    def parameter_count(self) -> int:
        return sum(param.data.size for param in self.parameters())


def attach(
    encoder: EncoderParams,
    cfg: LoraConfig,
    seed: int,
    name: str = "encoder",
) -> AdapterSet:
    """One adapter per target layer; A Xavier-uniform from `seed`, B zero."""
    indices: Sequence[int] = cfg.layers if cfg.layers is not None else range(len(encoder.layers))
    adapters: dict[int, LoraAdapter] = {}
    for index in indices:
        if not 0 <= index < len(encoder.layers):
            raise ConfigError(f"{name} has no layer {index}")
        layer = encoder.layers[index]
        if cfg.rank > min(layer.rows, layer.cols):
            raise ConfigError(
                f"rank {cfg.rank} exceeds {name} layer {index} shape {layer.rows}x{layer.cols}"
            )
        adapters[index] = LoraAdapter(
            A=Tensor(_draw_a(seed, index, cfg.rank, layer.cols), requires_grad=True),
            B=Tensor(np.zeros((layer.rows, cfg.rank)), requires_grad=True),
            layer_id=f"{name}.{index}",
        )
    return AdapterSet(name=name, adapters=adapters, cfg=cfg, seed=seed)


def reset(adapters: AdapterSet) -> None:
    adapters.reset()
