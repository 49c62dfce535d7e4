from dataclasses import dataclass, field
from typing import Literal, TypedDict

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.encoders import DualEncoder
from app.lora import AdapterSet, LoraConfig
from app.losses import LossConfig
from app.optim import AdamW, OptimizerConfig
from app.pool import PoolStore, RankedList
from app.tensor import Tensor


Tower = Literal["vision", "text"]


class EpisodeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    k: int = Field(default=16, ge=2, description="Candidates retrieved and re-ranked")
    epochs: int = Field(default=1, ge=1, description="Full-batch optimizer steps per episode")
    loss: LossConfig = Field(default_factory=LossConfig)
    lora: LoraConfig = Field(default_factory=LoraConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    seed: int = Field(default=0, ge=0)


@dataclass
class EpisodeResult:
    query_id: str
    pre_ranking: RankedList
    post_ranking: RankedList
    loss_trace: list[float] = field(default_factory=list)
    loss_after: float | None = None
    wall_time: float = 0.0
    aborted: bool = False
    error: str = ""

    @property
    def top_ids(self) -> tuple[str, ...]:
        return self.pre_ranking.ids[: len(self.post_ranking)]

    def to_record(self, method: str) -> str:
        ids = ",".join(self.post_ranking.ids)
        scores = ",".join(f"{s:.6f}" for s in self.post_ranking.scores)
        return f"{self.query_id}\t{method}\t{ids}\t{scores}"


class EpisodeState(TypedDict, total=False):
    # inputs
    query_id: str
    query_text: str | None
    query_embedding: np.ndarray
    pool: PoolStore
    model: DualEncoder
    config: EpisodeConfig
    full_tuning: bool
    workers: int

    # retrieval
    pre_ranking: RankedList
    top_ids: list[str]
    top_rows: np.ndarray
    captions: list[str]

    # adaptation
    episode_seed: int
    towers: list[Tower]
    train_rows: np.ndarray
    adapters: dict[Tower, AdapterSet]
    trainable: dict[Tower, list[tuple[Tensor, Tensor]]]
    optimizer: AdamW
    caption_features: np.ndarray
    epoch: int
    loss_trace: list[float]
    loss_after: float | None
    skipped: bool
    aborted: bool
    error: str

    # output
    post_ranking: RankedList
    started_at: float
    wall_time: float
