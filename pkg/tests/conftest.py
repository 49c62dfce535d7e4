import numpy as np
import pytest

from app.bench import BenchConfig, generate
from app.encoders import EncoderDims, init_dual_encoder
from app.lora import LoraConfig
from app.state import EpisodeConfig


@pytest.fixture
def dims() -> EncoderDims:
    return EncoderDims(d_in=32, d_hidden=16, d_e=8, n_layers=2)


@pytest.fixture
def model(dims):
    return init_dual_encoder(0, dims)


@pytest.fixture
def bench_config() -> BenchConfig:
    return BenchConfig(
        n_domains=2,
        items_per_domain=20,
        hard_group_size=2,
        n_slots=3,
        vocab_size=6,
        d_in=32,
        sigma=0.3,
        n_queries=5,
        n_distractors=30,
        n_train=200,
        seed=3,
    )


@pytest.fixture
def bench(bench_config):
    return generate(bench_config)


@pytest.fixture
def episode_config() -> EpisodeConfig:
    return EpisodeConfig(k=8, lora=LoraConfig(rank=2))


@pytest.fixture
def mixed_pool(bench, model):
    return bench.pool(model)


def random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)
