"""Desk-scale trend checks on the default benchmark. Run with `pytest -m slow`."""

from functools import lru_cache

import numpy as np
import pytest

from app.bench import generate
from app.config import RunConfig
from app.engine import EpisodeRunner, embed_query, train_base, zero_shot_rank
from app.evaluation import SuiteRunner, ablate_epochs, ablate_lora_vs_full, ablate_loss, ablate_topk, run_suite


pytestmark = pytest.mark.slow

BENCH_SEEDS = (0, 1, 2)


@lru_cache(maxsize=None)
def _suite(bench_seed: int) -> SuiteRunner:
    cfg = RunConfig(bench_seed=bench_seed)
    bench = generate(cfg.bench_config())
    model = train_base(
        bench.train,
        cfg.encoder_dims(),
        steps=cfg.train_steps,
        seed=cfg.train_seed,
        batch_size=cfg.train_batch_size,
        optimizer=cfg.train_optimizer(),
        tau=cfg.train_tau,
        held_out=bench.held_out,
        target_recall=cfg.train_target_recall,
        check_every=cfg.train_check_every,
    )
    return SuiteRunner(bench, model, cfg.episode_config(), threads=4, ft_epochs=cfg.ft_epochs)


@lru_cache(maxsize=None)
def _multi_report(bench_seed: int):
    suite = _suite(bench_seed)
    return run_suite(suite.bench, suite.model, suite.cfg, settings=("multi",), suite=suite)["multi"]


def test_default_benchmark_scale():
    suite = _suite(0)
    assert len(suite.bench.domains) >= 4
    assert len(suite.bench.queries) >= 200
    assert suite.pool("multi", suite.bench.domains[0]).count >= 20_000


def test_base_model_lands_in_the_mid_recall_band():
    for seed in BENCH_SEEDS:
        assert 0.35 <= _multi_report(seed).average("ZS").r1 <= 0.65


def test_episodes_beat_zero_shot_on_average():
    gains = [_multi_report(s).average("EFSA").r1 - _multi_report(s).average("ZS").r1 for s in BENCH_SEEDS]
    assert float(np.mean(gains)) >= 0.03


def test_baseline_ordering():
    for seed in BENCH_SEEDS:
        report = _multi_report(seed)
        assert report.average("T2T").r1 < report.average("ZS").r1
        assert report.average("FT").r1 <= report.average("EFSA").r1
        assert report.metadata["containment"] == "true"


def test_reset_invariant_over_many_episodes():
    suite = _suite(0)
    pool = suite.pool("multi", suite.bench.domains[0])
    runner = EpisodeRunner()
    for query in suite.bench.queries[:200]:
        embedding = embed_query(suite.model, query.text)
        before = zero_shot_rank(pool, embedding)
        runner.run(pool, query.text, suite.cfg, suite.model, query_id=query.id)
        after = zero_shot_rank(pool, embed_query(suite.model, query.text))
        assert after.ids == before.ids
        assert np.array_equal(after.scores, before.scores)


def test_single_step_is_enough():
    report = ablate_epochs(_suite(0), epochs=(1, 2, 3, 4))
    assert report.average("EFSA[epochs=4]").r5 <= report.average("EFSA[epochs=1]").r5 + 0.02


def test_wider_candidate_sets_do_not_lose_recall():
    report = ablate_topk(_suite(0), ks=(8, 16, 32, 64))
    assert report.average("EFSA[k=32]").r10 >= report.average("EFSA[k=8]").r10 - 0.005
    assert report.metadata["containment"] == "true"


def test_combined_loss_is_not_worse_than_either_term():
    report = ablate_loss(_suite(0))
    best_single = max(report.average("EFSA[hinge]").r1, report.average("EFSA[contrastive]").r1)
    assert report.average("EFSA[combined]").r1 >= best_single - 0.01


def test_low_rank_adapters_hold_up_against_full_tuning():
    report = ablate_lora_vs_full(_suite(0))
    assert report.average("EFSA[lora]").r1 >= report.average("EFSA[full]").r1
