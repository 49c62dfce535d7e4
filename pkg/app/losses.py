import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import ConfigError, ContractError, ShapeError
from app.tensor import (
    Tensor,
    add,
    as_tensor,
    diagonal,
    log_softmax_rows,
    matmul,
    pairwise_margin,
    relu,
    scale,
    total,
    transpose,
)


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(default=0.07, gt=0.0, description="Softmax temperature")
    margin: float = Field(default=0.2, ge=0.0, description="Hinge margin m")
    alpha: float = Field(default=1.7, description="Contrastive weight")
    beta: float = Field(default=0.3, description="Hinge weight")

    @model_validator(mode="after")
    def _validate_weights(self) -> "LossConfig":
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")
        if self.alpha == 0.0 and self.beta == 0.0:
            raise ValueError("alpha and beta cannot both be zero")
        return self


def similarities(img: Tensor | np.ndarray, txt: Tensor | np.ndarray) -> Tensor:
    """sims[i, j] = sim(f_v,i, f_t,j) for unit-norm rows."""
    img, txt = as_tensor(img), as_tensor(txt)
    if img.data.ndim != 2 or txt.data.ndim != 2:
        raise ShapeError(f"expected embedding matrices, got {img.shape} and {txt.shape}")
    if img.shape[0] == 0:
        raise ContractError("loss needs at least one pair")
    if img.shape != txt.shape:
        raise ShapeError(f"image batch {img.shape} and text batch {txt.shape} differ")
    return matmul(img, transpose(txt))


def contrastive_loss(img: Tensor | np.ndarray, txt: Tensor | np.ndarray, tau: float) -> Tensor:
    """Image-anchored InfoNCE: each image's own caption against all N captions."""
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    sims = similarities(img, txt)
    log_probs = log_softmax_rows(scale(sims, 1.0 / tau))
    return scale(total(diagonal(log_probs)), -1.0 / sims.shape[0])


def hinge_loss(img: Tensor | np.ndarray, txt: Tensor | np.ndarray, margin: float) -> Tensor:
    sims = similarities(img, txt)
    return scale(total(relu(pairwise_margin(sims, margin))), 1.0 / sims.shape[0])


def combine(contrastive: Tensor | None, hinge: Tensor | None, cfg: LossConfig) -> Tensor:
    """alpha * contrastive + beta * hinge; zero-weight terms are left out entirely."""
    terms = []
    if cfg.alpha != 0.0 and contrastive is not None:
        terms.append(scale(contrastive, cfg.alpha))
    if cfg.beta != 0.0 and hinge is not None:
        terms.append(scale(hinge, cfg.beta))
    if not terms:
        raise ConfigError("no loss term carries weight")
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])


def combined_loss(img: Tensor | np.ndarray, txt: Tensor | np.ndarray, cfg: LossConfig) -> Tensor:
    contrastive = contrastive_loss(img, txt, cfg.tau) if cfg.alpha != 0.0 else None
    hinge = hinge_loss(img, txt, cfg.margin) if cfg.beta != 0.0 else None
    return combine(contrastive, hinge, cfg)
