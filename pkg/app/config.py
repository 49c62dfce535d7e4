"""Flat run configuration: defaults < key=value config file < --set overrides."""

import hashlib
import logging
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.bench import BenchConfig
from app.encoders import EncoderDims, Nonlinearity
from app.errors import ConfigError, MissingArtifactError
from app.lora import LoraConfig, LoraTarget
from app.losses import LossConfig
from app.optim import OptimizerConfig
from app.state import EpisodeConfig


logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.conf"


def _int_list(value: str) -> tuple[int, ...]:
    return tuple(int(part) for part in value.split(",") if part.strip())


def _str_list(value: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in value.split(",") if part.strip())


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # paths
    bench_dir: Path = Path("artifacts/bench")
    model_dir: Path = Path("artifacts/model")
    index_dir: Path = Path("artifacts/index")
    report_dir: Path = Path("artifacts/reports")

    # benchmark
    n_domains: int = 4
    items_per_domain: int = 400
    hard_group_size: int = 2
    n_slots: int = 3
    vocab_size: int = 12
    sigma: float = 0.6
    n_queries: int = 50
    n_distractors: int = 20000
    n_train: int = 4000
    caption_dropout: float = 0.25
    attribute_scale: float = 1.0
    bench_seed: int = 0

    # encoders
    d_in: int = 256
    d_hidden: int = 256
    d_e: int = 64
    n_layers: int = 2
    nonlinearity: Nonlinearity = "tanh"

    # base pre-training
    train_steps: int = Field(default=600, ge=0)
    train_batch_size: int = Field(default=128, ge=2)
    train_lr: float = Field(default=2e-3, gt=0.0)
    train_tau: float = Field(default=0.07, gt=0.0)
    # stop once held-out Recall@1 reaches this (0 trains for all train_steps)
    train_target_recall: float = Field(default=0.5, ge=0.0, le=1.0)
    train_check_every: int = Field(default=10, ge=1)
    train_seed: int = 0

    # episodes
    k: int = 16
    epochs: int = 1
    tau: float = 0.07
    margin: float = 0.2
    alpha: float = 1.7
    beta: float = 0.3
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lora_rank: int = 4
    lora_scaling: float = 15.0
    lora_target: LoraTarget = "both"
    seed: int = 0

    # evaluation
    methods: str = "ZS,FT,T2T,EFSA"
    settings: str = "single,multi"
    ft_epochs: int = Field(default=4, ge=0)
    ft_batch_size: int = Field(default=64, ge=2)
    threads: int = Field(default=1, ge=1)
    ablate_ks: str = "8,16,32,64"
    ablate_epochs: str = "1,2,3,4"
    ablate_setting: Literal["single", "multi"] = "multi"

    # storage arithmetic
    storage_pool_size: int = 1_000_000
    storage_d_e: int = 768
    storage_bytes_per_scalar: float = 4.0
    storage_caption_tokens: float = 30.0
    storage_bytes_per_token: float = 2.0

    @model_validator(mode="after")
    def _validate_sections(self) -> "RunConfig":
        # building every section validates its ranges before any work starts
        self.bench_config()
        self.encoder_dims()
        self.episode_config()
        unknown = set(self.method_list()) - {"ZS", "FT", "T2T", "EFSA"}
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        bad = set(self.setting_list()) - {"single", "multi"}
        if bad:
            raise ValueError(f"unknown settings: {sorted(bad)}")
        if not self.ablate_k_list() or min(self.ablate_k_list()) < 2:
            raise ValueError("ablate_ks must list values >= 2")
        if not self.ablate_epoch_list() or min(self.ablate_epoch_list()) < 1:
            raise ValueError("ablate_epochs must list values >= 1")
        return self

    def bench_config(self) -> BenchConfig:
        return BenchConfig(
            n_domains=self.n_domains,
            items_per_domain=self.items_per_domain,
            hard_group_size=self.hard_group_size,
            n_slots=self.n_slots,
            vocab_size=self.vocab_size,
            d_in=self.d_in,
            sigma=self.sigma,
            n_queries=self.n_queries,
            n_distractors=self.n_distractors,
            n_train=self.n_train,
            caption_dropout=self.caption_dropout,
            attribute_scale=self.attribute_scale,
            seed=self.bench_seed,
        )

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(
            d_in=self.d_in,
            d_hidden=self.d_hidden,
            d_e=self.d_e,
            n_layers=self.n_layers,
            nonlinearity=self.nonlinearity,
        )

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            k=self.k,
            epochs=self.epochs,
            loss=LossConfig(tau=self.tau, margin=self.margin, alpha=self.alpha, beta=self.beta),
            lora=LoraConfig(rank=self.lora_rank, scaling=self.lora_scaling, target=self.lora_target),
            optimizer=OptimizerConfig(
                lr=self.lr,
                beta1=self.beta1,
                beta2=self.beta2,
                eps=self.eps,
                weight_decay=self.weight_decay,
            ),
            seed=self.seed,
        )

    def train_optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.train_lr, weight_decay=0.0)

    def method_list(self) -> tuple[str, ...]:
        return _str_list(self.methods)

    def setting_list(self) -> tuple[str, ...]:
        return _str_list(self.settings)

    def ablate_k_list(self) -> tuple[int, ...]:
        return _int_list(self.ablate_ks)

    def ablate_epoch_list(self) -> tuple[int, ...]:
        return _int_list(self.ablate_epochs)

    def resolved_lines(self) -> list[str]:
        return [f"{key}={value}" for key, value in sorted(self.model_dump(mode="json").items())]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.resolved_lines()).encode("utf-8")).hexdigest()[:16]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """UTF-8 key=value lines; `#` starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        values[key] = value
    return values


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_config(settings: Mapping[str, str]) -> RunConfig:
    try:
        return RunConfig(**settings)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in error['loc']) or 'config'}: {error['msg']}" for error in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from exc


def load_config(path: Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    settings: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError("config file", path)
        settings.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    settings.update(parse_overrides(overrides))
    cfg = build_config(settings)
    logger.debug("Resolved configuration digest=%s", cfg.digest())
    return cfg


def write_resolved_config(cfg: RunConfig, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG_NAME
    path.write_text("\n".join(cfg.resolved_lines()) + "\n", encoding="utf-8")
    return path
