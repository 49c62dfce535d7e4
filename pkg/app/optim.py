import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import ContractError, ShapeError
from app.tensor import Tensor


logger = logging.getLogger(__name__)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # lr=0 is accepted so a no-op adaptation can be run end to end
    lr: float = Field(default=5e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)


@dataclass
class AdamState:
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState | None,
    cfg: OptimizerConfig,
    t: int,
) -> tuple[list[np.ndarray], AdamState]:
    """One AdamW update with bias correction and decoupled weight decay.

        p <- p - lr * wd * p
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    if t < 1:
        raise ContractError(f"step index must be >= 1, got {t}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    if state is None or not state.exp_avg:
        state = AdamState(
            exp_avg=[np.zeros_like(p, dtype=np.float64) for p in params],
            exp_avg_sq=[np.zeros_like(p, dtype=np.float64) for p in params],
        )

    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    updated = []
    for i, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ShapeError(f"param {i}: shape {param.shape} vs gradient {grad.shape}")
        m = cfg.beta1 * state.exp_avg[i] + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * state.exp_avg_sq[i] + (1.0 - cfg.beta2) * grad * grad
        state.exp_avg[i] = m
        state.exp_avg_sq[i] = v
        decayed = param * (1.0 - cfg.lr * cfg.weight_decay)
        updated.append(decayed - cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps))
    state.step = t
    return updated, state


class AdamW:
    """Applies `adamw_step` in place to leaf tensors."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state: AdamState | None = None
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        arrays = [p.data for p in self.params]
        grad_list = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        updated, self.state = adamw_step(arrays, grad_list, self.state, self.cfg, self.t)
        for param, value in zip(self.params, updated):
            param.data[...] = value

    @staticmethod
    def grads_finite(grads: dict[Tensor, np.ndarray]) -> bool:
        return all(np.all(np.isfinite(g)) for g in grads.values())
