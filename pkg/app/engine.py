"""Episode driver and the baselines the episodes are compared against."""

import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.encoders import (
    DualEncoder,
    EncoderDims,
    embed,
    embed_texts,
    encode,
    encode_batch,
    featurize_text,
    featurize_texts,
    init_dual_encoder,
)
from app.errors import AdaptationError, ContractError, TrainingError
from app.graph import build_episode_graph
from app.lora import AdapterSet, attach
from app.losses import LossConfig, combined_loss, contrastive_loss
from app.nodes.attach import tower_seed
from app.observability import log_event
from app.optim import AdamW, OptimizerConfig
from app.pool import PoolStore, RankedList, rank_rows, top_k
from app.state import EpisodeConfig, EpisodeResult, EpisodeState
from app.tensor import add, backward, matmul_kernel, row_dot, scale


logger = logging.getLogger(__name__)


def zero_shot_rank(pool: PoolStore, query_embedding: np.ndarray, workers: int = 1) -> RankedList:
    """Full-pool cosine ranking with the base model's cached embeddings."""
    return top_k(pool, query_embedding, max(pool.count, 1), workers=workers)


def embed_query(model: DualEncoder, text: str) -> np.ndarray:
    return encode(model.text, featurize_text(text, model.text.d_in)).data.astype(np.float32)


class EpisodeRunner:
    """Holds one compiled episode graph; safe to call from several threads."""

    def __init__(self, graph=None):
        self.graph = graph or build_episode_graph()

    def run(
        self,
        pool: PoolStore,
        query: str | np.ndarray,
        cfg: EpisodeConfig,
        base: DualEncoder,
        query_id: str | None = None,
        full_tuning: bool = False,
        strict: bool = False,
        workers: int = 1,
    ) -> EpisodeResult:
        is_text = isinstance(query, str)
        if query_id is None:
            if not is_text:
                raise ContractError("embedding queries need an explicit query_id")
            query_id = query
        state: EpisodeState = {
            "query_id": query_id,
            "query_text": query if is_text else None,
            "query_embedding": None if is_text else np.asarray(query, dtype=np.float32),
            "pool": pool,
            "model": base,
            "config": cfg,
            "full_tuning": full_tuning,
            "workers": workers,
            "started_at": time.perf_counter(),
        }
        final = self.graph.invoke(state, config={"recursion_limit": cfg.epochs + 16})
        result = EpisodeResult(
            query_id=query_id,
            pre_ranking=final["pre_ranking"],
            post_ranking=final["post_ranking"],
            loss_trace=list(final.get("loss_trace", [])),
            loss_after=final.get("loss_after"),
            wall_time=final.get("wall_time", 0.0),
            aborted=bool(final.get("aborted")),
            error=final.get("error", ""),
        )
        log_event(
            "episode.completed",
            {
                "query_id": query_id,
                "k": cfg.k,
                "epochs": len(result.loss_trace),
                "aborted": result.aborted,
                "loss_after": result.loss_after,
                "wall_time": round(result.wall_time, 6),
            },
        )
        if strict and result.aborted:
            raise AdaptationError(f"episode {query_id} aborted: {result.error}")
        return result


_DEFAULT_RUNNER: EpisodeRunner | None = None


def run_episode(
    pool: PoolStore,
    query: str | np.ndarray,
    cfg: EpisodeConfig,
    base: DualEncoder,
    query_id: str | None = None,
    full_tuning: bool = False,
    strict: bool = False,
) -> EpisodeResult:
    global _DEFAULT_RUNNER
    if _DEFAULT_RUNNER is None:
        _DEFAULT_RUNNER = EpisodeRunner()
    return _DEFAULT_RUNNER.run(pool, query, cfg, base, query_id, full_tuning, strict)


@dataclass
class AdaptedDualEncoder:
    """A base model with persistent (never reset) adapters, used by the F.T baseline."""

    base: DualEncoder
    adapters: dict[str, AdapterSet] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)

    def embed_pool(self, pool: PoolStore) -> np.ndarray:
        if "vision" not in self.adapters:
            return pool.embeddings
        return embed(self.base.vision, pool.features, self.adapters["vision"])

    def embed_query(self, text: str) -> np.ndarray:
        features = featurize_text(text, self.base.text.d_in).values.reshape(1, -1)
        return encode_batch(self.base.text, features, self.adapters.get("text")).data[0].astype(
            np.float32
        )

    def ranker(self, pool: PoolStore) -> "PoolRanker":
        return PoolRanker(self, pool, self.embed_pool(pool))


@dataclass
class PoolRanker:
    model: AdaptedDualEncoder
    pool: PoolStore
    embeddings: np.ndarray

    def rank(self, query: str) -> RankedList:
        rows = np.arange(self.pool.count)
        return rank_rows(self.pool, rows, row_dot(self.embeddings, self.model.embed_query(query)))


def finetune_baseline(
    pool: PoolStore,
    base: DualEncoder,
    cfg: EpisodeConfig,
    epochs: int = 4,
    batch_size: int = 64,
) -> AdaptedDualEncoder:
    """Persistent LoRA fine-tuning over every (image, caption) pair of the pool."""
    if not pool.has_features:
        raise ContractError("fine-tuning needs image features for every pool row")
    if epochs < 0:
        raise ContractError(f"epochs must be >= 0, got {epochs}")

    captions = [record.caption for record in pool.records]
    caption_features, degenerate = featurize_texts(captions, base.text.d_in)
    usable = np.flatnonzero(~degenerate)
    adapters = {
        tower: attach(getattr(base, tower), cfg.lora, tower_seed(cfg.seed, tower), tower)
        for tower in ("vision", "text")
        if cfg.lora.adapts(tower)
    }
    model = AdaptedDualEncoder(base=base, adapters=adapters)
    params = [p for tower in sorted(adapters) for p in adapters[tower].parameters()]
    if epochs == 0 or not params or usable.shape[0] < 2:
        return model

    optimizer = AdamW(params, cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 7])
    for epoch in range(1, epochs + 1):
        order = usable[rng.permutation(usable.shape[0])]
        losses = []
        for start in range(0, order.shape[0], batch_size):
            batch = np.sort(order[start : start + batch_size])
            if batch.shape[0] < 2:
                continue
            images = encode_batch(base.vision, pool.features[batch], adapters.get("vision"))
            texts = encode_batch(base.text, caption_features[batch], adapters.get("text"))
            loss = combined_loss(images, texts, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise AdaptationError(f"fine-tuning loss became non-finite in epoch {epoch}")
            optimizer.step(backward(loss, wrt=params))
            losses.append(value)
        model.loss_trace.append(float(np.mean(losses)) if losses else float("nan"))
        log_event(
            "finetune.epoch_completed",
            {"epoch": epoch, "loss": model.loss_trace[-1], "steps": len(losses)},
        )
    return model


@dataclass
class CaptionIndex:
    """Base text-tower embeddings of every cached caption of a pool."""

    pool: PoolStore
    embeddings: np.ndarray
    degenerate: np.ndarray

    @classmethod
    def build(cls, pool: PoolStore, base: DualEncoder) -> "CaptionIndex":
        embeddings, degenerate = embed_texts(base.text, [r.caption for r in pool.records])
        return cls(pool=pool, embeddings=embeddings, degenerate=degenerate)


def t2t_rank(
    pool: PoolStore,
    query: str,
    base: DualEncoder,
    captions: CaptionIndex | None = None,
) -> RankedList:
    """Ranks images by query-to-caption similarity; empty captions go last."""
    captions = captions or CaptionIndex.build(pool, base)
    scores = row_dot(captions.embeddings, embed_query(base, query))
    # below any cosine, so degenerate captions sort after everything else, by id
    scores[captions.degenerate] = -2.0
    return rank_rows(pool, np.arange(pool.count), scores)


@dataclass
class PairedDataset:
    features: np.ndarray
    captions: list[str]

    def __post_init__(self) -> None:
        if self.features.shape[0] != len(self.captions):
            raise ContractError(
                f"{self.features.shape[0]} feature rows for {len(self.captions)} captions"
            )


@dataclass
class HeldOutQueries:
    """Queries with known target rows in a pool of raw image features, kept out of every report."""

    features: np.ndarray
    queries: list[str]
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if not self.queries or self.targets.shape != (len(self.queries),):
            raise ContractError(f"{len(self.queries)} held-out queries for {self.targets.shape} targets")
        if self.targets.min() < 0 or self.targets.max() >= self.features.shape[0]:
            raise ContractError("held-out target outside the held-out pool")

    def recall_at_1(self, model: DualEncoder) -> float:
        pool = embed(model.vision, self.features).astype(np.float64)
        texts, degenerate = embed_texts(model.text, self.queries)
        scores = matmul_kernel(texts.astype(np.float64), pool.T)
        # argmax keeps the lowest row on ties, like the id order of a ranking
        hits = (np.argmax(scores, axis=1) == self.targets) & ~degenerate
        return float(hits.mean())


def train_base(
    dataset: PairedDataset,
    dims: EncoderDims,
    steps: int,
    seed: int,
    batch_size: int = 128,
    optimizer: OptimizerConfig | None = None,
    tau: float = 0.07,
    held_out: HeldOutQueries | None = None,
    target_recall: float = 0.0,
    check_every: int = 10,
) -> DualEncoder:
    """Contrastive training of both towers from Xavier initialization.

    With `held_out` and a positive `target_recall`, training stops at the first
    check (every `check_every` steps) whose held-out Recall@1 reaches the target;
    `steps` is then an upper bound.
    """
    if check_every < 1:
        raise ContractError(f"check_every must be >= 1, got {check_every}")
    model = init_dual_encoder(seed, dims)
    if steps <= 0:
        return model

    caption_features, degenerate = featurize_texts(dataset.captions, dims.d_in)
    usable = np.flatnonzero(~degenerate)
    if usable.shape[0] < 2:
        raise TrainingError("pre-training needs at least two non-empty captions")

    optimizer_cfg = optimizer or OptimizerConfig(lr=2e-3, weight_decay=0.0)
    vision = model.vision.layer_tensors(requires_grad=True)
    text = model.text.layer_tensors(requires_grad=True)
    params = [t for pair in vision + text for t in pair]
    opt = AdamW(params, optimizer_cfg)
    rng = np.random.default_rng([seed, 1])
    batch_size = min(batch_size, usable.shape[0])

    for step in range(1, steps + 1):
        batch = np.sort(rng.choice(usable, size=batch_size, replace=False))
        images = encode_batch(model.vision, dataset.features[batch], layer_tensors=vision)
        texts = encode_batch(model.text, caption_features[batch], layer_tensors=text)
        loss = scale(add(contrastive_loss(images, texts, tau), contrastive_loss(texts, images, tau)), 0.5)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"pre-training diverged at step {step}")
        opt.step(backward(loss, wrt=params))
        if step == 1 or step % 50 == 0 or step == steps:
            log_event("train_base.step", {"step": step, "loss": round(value, 6)})
        if held_out is not None and target_recall > 0 and (step % check_every == 0 or step == steps):
            current = DualEncoder(vision=model.vision.with_weights(vision), text=model.text.with_weights(text))
            recall = held_out.recall_at_1(current)
            log_event("train_base.held_out", {"step": step, "recall_at_1": round(recall, 4)})
            if recall >= target_recall:
                logger.info("Held-out Recall@1 %.4f reached target %.4f at step %s", recall, target_recall, step)
                return current

    return DualEncoder(vision=model.vision.with_weights(vision), text=model.text.with_weights(text))


def write_episode_records(path: Path, results: Sequence[EpisodeResult], method: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_record(method) + "\n" for r in results), encoding="utf-8")
    return path


__all__ = [
    "AdaptedDualEncoder",
    "CaptionIndex",
    "EpisodeRunner",
    "HeldOutQueries",
    "LossConfig",
    "PairedDataset",
    "embed_query",
    "finetune_baseline",
    "run_episode",
    "t2t_rank",
    "train_base",
    "write_episode_records",
    "zero_shot_rank",
]
