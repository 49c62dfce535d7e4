import numpy as np
import pytest

from app.encoders import embed, encode_batch, featurize_text, featurize_texts, init_dual_encoder
from app.engine import (
    CaptionIndex,
    EpisodeRunner,
    HeldOutQueries,
    PairedDataset,
    embed_query,
    finetune_baseline,
    run_episode,
    t2t_rank,
    train_base,
    write_episode_records,
    zero_shot_rank,
)
from app.errors import AdaptationError, ContractError, TrainingError
from app.graph import build_episode_graph
from app.lora import LoraConfig, attach
from app.losses import combined_loss
from app.nodes.adapt import AdaptNode
from app.nodes.attach import episode_seed, tower_seed
from app.optim import AdamW, OptimizerConfig
from app.pool import PoolRecord, PoolStore
from app.state import EpisodeConfig
from app.tensor import backward, row_dot
from tests.conftest import random_unit_rows


class _AbortingAdaptNode(AdaptNode):
    def run(self, state):
        return self._abort(state, "forced")


def _with(cfg: EpisodeConfig, **changes) -> EpisodeConfig:
    return cfg.model_copy(update=changes)


def test_post_ranking_is_a_permutation_of_the_top_k(mixed_pool, model, bench, episode_config):
    for query in bench.queries[:3]:
        result = run_episode(mixed_pool, query.text, episode_config, model, query_id=query.id)
        assert len(result.post_ranking) == episode_config.k
        assert sorted(result.post_ranking.ids) == sorted(result.pre_ranking.head(episode_config.k).ids)
        assert len(result.pre_ranking) == mixed_pool.count
        assert not result.aborted


def test_episode_leaves_the_base_model_untouched(mixed_pool, model, bench, episode_config):
    query = bench.queries[0]
    embedding = embed_query(model, query.text)
    before = zero_shot_rank(mixed_pool, embedding)
    weights = [layer.weight.copy() for layer in model.vision.layers + model.text.layers]

    run_episode(mixed_pool, query.text, _with(episode_config, epochs=3), model, query_id=query.id)

    after = zero_shot_rank(mixed_pool, embed_query(model, query.text))
    assert after.ids == before.ids
    assert np.array_equal(after.scores, before.scores)
    for original, layer in zip(weights, model.vision.layers + model.text.layers):
        assert np.array_equal(original, layer.weight)


def test_zero_learning_rate_reproduces_zero_shot_order(mixed_pool, model, bench, episode_config):
    cfg = _with(episode_config, optimizer=OptimizerConfig(lr=0.0))
    for query in bench.queries:
        result = run_episode(mixed_pool, query.text, cfg, model, query_id=query.id)
        assert result.post_ranking.ids == result.pre_ranking.head(cfg.k).ids


def test_zero_scaling_reproduces_zero_shot_order(mixed_pool, model, bench, episode_config):
    cfg = _with(episode_config, lora=LoraConfig(rank=2, scaling=0.0))
    query = bench.queries[1]
    result = run_episode(mixed_pool, query.text, cfg, model, query_id=query.id)
    assert result.post_ranking.ids == result.pre_ranking.head(cfg.k).ids


def test_episodes_are_deterministic_and_order_independent(mixed_pool, model, bench, episode_config):
    first, second = bench.queries[0], bench.queries[1]
    runner = EpisodeRunner()
    a1 = runner.run(mixed_pool, first.text, episode_config, model, query_id=first.id)
    b1 = runner.run(mixed_pool, second.text, episode_config, model, query_id=second.id)
    b2 = runner.run(mixed_pool, second.text, episode_config, model, query_id=second.id)
    a2 = runner.run(mixed_pool, first.text, episode_config, model, query_id=first.id)
    for x, y in ((a1, a2), (b1, b2)):
        assert x.post_ranking.ids == y.post_ranking.ids
        assert np.array_equal(x.post_ranking.scores, y.post_ranking.scores)
        assert x.loss_trace == y.loss_trace


def test_loss_trace_has_one_entry_per_epoch(mixed_pool, model, bench, episode_config):
    query = bench.queries[2]
    result = run_episode(mixed_pool, query.text, _with(episode_config, epochs=3), model, query_id=query.id)
    assert len(result.loss_trace) == 3
    assert result.loss_after is not None
    assert result.wall_time > 0.0


def test_full_tuning_does_not_write_base_weights(mixed_pool, model, bench, episode_config):
    weights = [layer.weight.copy() for layer in model.vision.layers + model.text.layers]
    query = bench.queries[0]
    result = run_episode(
        mixed_pool, query.text, _with(episode_config, epochs=2), model, query_id=query.id, full_tuning=True
    )
    assert sorted(result.post_ranking.ids) == sorted(result.pre_ranking.head(episode_config.k).ids)
    for original, layer in zip(weights, model.vision.layers + model.text.layers):
        assert np.array_equal(original, layer.weight)


def test_aborted_episode_falls_back_to_zero_shot(mixed_pool, model, bench, episode_config):
    runner = EpisodeRunner(build_episode_graph(adapt_node=_AbortingAdaptNode()))
    query = bench.queries[0]
    result = runner.run(mixed_pool, query.text, episode_config, model, query_id=query.id)
    assert result.aborted
    assert result.error == "forced"
    assert result.post_ranking.ids == result.pre_ranking.head(episode_config.k).ids
    with pytest.raises(AdaptationError):
        runner.run(mixed_pool, query.text, episode_config, model, query_id=query.id, strict=True)


def test_embedding_queries(mixed_pool, model, bench, episode_config):
    query = bench.queries[0]
    embedding = embed_query(model, query.text)
    with pytest.raises(ContractError):
        run_episode(mixed_pool, embedding, episode_config, model)
    result = run_episode(mixed_pool, embedding, episode_config, model, query_id=query.id)
    assert result.pre_ranking.ids == zero_shot_rank(mixed_pool, embedding).ids


def test_pool_smaller_than_k_is_rejected(model, dims, episode_config):
    rows = random_unit_rows(np.random.default_rng(0), 3, dims.d_e)
    pool = PoolStore(rows, [PoolRecord(f"x{i}", "d", "a caption") for i in range(3)])
    with pytest.raises(ContractError):
        run_episode(pool, "a query", episode_config, model)


def test_pool_without_features_adapts_the_text_tower_only(model, dims, episode_config):
    rows = random_unit_rows(np.random.default_rng(1), 12, dims.d_e)
    pool = PoolStore(rows, [PoolRecord(f"x{i:02d}", "d", f"red boat number {i}") for i in range(12)])
    result = run_episode(pool, "red boat", _with(episode_config, epochs=2), model)
    assert sorted(result.post_ranking.ids) == sorted(result.pre_ranking.head(episode_config.k).ids)
    assert len(result.loss_trace) == 2


def test_seeds_depend_only_on_ids():
    assert episode_seed(0, "q-1") == episode_seed(0, "q-1")
    assert episode_seed(0, "q-1") != episode_seed(0, "q-2")
    assert episode_seed(5, "q-1") != episode_seed(0, "q-1")
    assert tower_seed(9, "vision") != tower_seed(9, "text")


def test_t2t_puts_empty_captions_last(model, dims):
    rows = random_unit_rows(np.random.default_rng(2), 4, dims.d_e)
    captions = ["red boat", "", "blue car", "green tree"]
    pool = PoolStore(rows, [PoolRecord(f"x{i}", "d", c) for i, c in enumerate(captions)])
    index = CaptionIndex.build(pool, model)
    assert index.degenerate.tolist() == [False, True, False, False]
    ranking = t2t_rank(pool, "red boat", model, index)
    assert ranking.ids[-1] == "x1"
    assert ranking.ids[0] == "x0"
    assert t2t_rank(pool, "red boat", model).ids == ranking.ids


def test_finetune_baseline(mixed_pool, model, bench, episode_config):
    tuned = finetune_baseline(mixed_pool, model, episode_config, epochs=2, batch_size=16)
    again = finetune_baseline(mixed_pool, model, episode_config, epochs=2, batch_size=16)
    assert len(tuned.loss_trace) == 2
    assert np.array_equal(tuned.embed_pool(mixed_pool), again.embed_pool(mixed_pool))
    query = bench.queries[0].text
    ranking = tuned.ranker(mixed_pool).rank(query)
    assert len(ranking) == mixed_pool.count
    assert ranking.ids == again.ranker(mixed_pool).rank(query).ids


def test_finetune_without_epochs_matches_zero_shot(mixed_pool, model, bench, episode_config):
    tuned = finetune_baseline(mixed_pool, model, episode_config, epochs=0)
    query = bench.queries[0].text
    assert tuned.ranker(mixed_pool).rank(query).ids == zero_shot_rank(mixed_pool, embed_query(model, query)).ids


def test_finetune_needs_features(model, dims, episode_config):
    rows = random_unit_rows(np.random.default_rng(3), 4, dims.d_e)
    pool = PoolStore(rows, [PoolRecord(f"x{i}", "d", "c") for i in range(4)])
    with pytest.raises(ContractError):
        finetune_baseline(pool, model, episode_config)


def test_train_base_is_deterministic(bench, dims):
    a = train_base(bench.train, dims, steps=3, seed=1, batch_size=16)
    b = train_base(bench.train, dims, steps=3, seed=1, batch_size=16)
    untrained = init_dual_encoder(1, dims)
    for la, lb, lu in zip(a.vision.layers, b.vision.layers, untrained.vision.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert not np.array_equal(la.weight, lu.weight)
    zero = train_base(bench.train, dims, steps=0, seed=1)
    assert np.array_equal(zero.text.layers[0].weight, untrained.text.layers[0].weight)


def test_train_base_needs_two_captions(dims):
    dataset = PairedDataset(np.ones((3, dims.d_in), dtype=np.float32), ["only one", "", "  "])
    with pytest.raises(TrainingError):
        train_base(dataset, dims, steps=1, seed=0)
    with pytest.raises(ContractError):
        PairedDataset(np.ones((2, dims.d_in)), ["one"])


def test_write_episode_records(tmp_path, mixed_pool, model, bench, episode_config):
    query = bench.queries[0]
    result = run_episode(mixed_pool, query.text, episode_config, model, query_id=query.id)
    path = write_episode_records(tmp_path / "out" / "episodes.records", [result], "efsa")
    line = path.read_text(encoding="utf-8").rstrip("\n")
    query_id, method, ids, scores = line.split("\t")
    assert (query_id, method) == (query.id, "efsa")
    assert tuple(ids.split(",")) == result.post_ranking.ids
    assert len(scores.split(",")) == episode_config.k


def test_single_episode_matches_a_scripted_oracle(model, dims):
    rng = np.random.default_rng(21)
    features = rng.standard_normal((3, dims.d_in)).astype(np.float32)
    captions = ["red square tile", "blue round tile", "green square pot"]
    records = [PoolRecord(item_id, "d", caption) for item_id, caption in zip("abc", captions)]
    pool = PoolStore(embed(model.vision, features), records, features)
    cfg = EpisodeConfig(k=2, epochs=1, lora=LoraConfig(rank=2), optimizer=OptimizerConfig(lr=0.05))
    query = "red square"

    result = run_episode(pool, query, cfg, model, query_id="oracle")

    # retrieve
    zero_shot = row_dot(pool.embeddings, embed_query(model, query))
    top = sorted(range(3), key=lambda row: (-zero_shot[row], records[row].id))[:2]
    rows = np.array(top)
    assert result.pre_ranking.head(2).ids == tuple(records[row].id for row in top)
    # attach
    seed = episode_seed(cfg.seed, "oracle")
    adapters = {
        tower: attach(getattr(model, tower), cfg.lora, tower_seed(seed, tower), tower)
        for tower in ("vision", "text")
    }
    params = adapters["vision"].parameters() + adapters["text"].parameters()
    optimizer = AdamW(params, cfg.optimizer)
    caption_features, _ = featurize_texts([captions[row] for row in top], dims.d_in)
    # adapt
    loss = combined_loss(
        encode_batch(model.vision, features[rows], adapters["vision"]),
        encode_batch(model.text, caption_features, adapters["text"]),
        cfg.loss,
    )
    optimizer.step(backward(loss, wrt=params))
    # rerank
    images = encode_batch(model.vision, features[rows], adapters["vision"]).data.astype(np.float32)
    query_features = featurize_text(query, dims.d_in).values.reshape(1, -1)
    adapted_query = encode_batch(model.text, query_features, adapters["text"]).data[0].astype(np.float32)
    scores = row_dot(images, adapted_query)
    order = sorted(range(2), key=lambda i: (-scores[i], records[top[i]].id))

    assert result.loss_trace == [loss.item()]
    assert result.post_ranking.ids == tuple(records[top[i]].id for i in order)
    assert np.allclose(result.post_ranking.scores, scores[order], rtol=0.0, atol=1e-6)
    # reset
    assert zero_shot_rank(pool, embed_query(model, query)).ids == result.pre_ranking.ids


def test_one_step_lowers_the_episode_loss(mixed_pool, model, bench, episode_config):
    runner = EpisodeRunner()
    results = [runner.run(mixed_pool, q.text, episode_config, model, query_id=q.id) for q in bench.queries]
    descended = [r.loss_after <= r.loss_trace[0] for r in results if not r.aborted]
    assert len(descended) == len(results)
    assert sum(descended) >= 0.95 * len(descended)


def _same_weights(a, b) -> bool:
    return all(
        np.array_equal(la.weight, lb.weight)
        for tower in ("vision", "text")
        for la, lb in zip(getattr(a, tower).layers, getattr(b, tower).layers)
    )


def test_train_base_stops_at_the_held_out_target(bench, dims, monkeypatch):
    assert bench.held_out is not None
    full = train_base(bench.train, dims, steps=6, seed=1, batch_size=16)
    unreached = train_base(
        bench.train, dims, steps=6, seed=1, batch_size=16, held_out=bench.held_out, target_recall=1.0, check_every=2
    )
    assert _same_weights(full, unreached) or bench.held_out.recall_at_1(unreached) == 1.0

    monkeypatch.setattr(HeldOutQueries, "recall_at_1", lambda self, model: 0.6)
    stopped = train_base(
        bench.train, dims, steps=6, seed=1, batch_size=16, held_out=bench.held_out, target_recall=0.5, check_every=2
    )
    assert _same_weights(stopped, train_base(bench.train, dims, steps=2, seed=1, batch_size=16))
    ignored = train_base(
        bench.train, dims, steps=6, seed=1, batch_size=16, held_out=bench.held_out, target_recall=0.0, check_every=2
    )
    assert _same_weights(ignored, full)
    with pytest.raises(ContractError):
        train_base(bench.train, dims, steps=1, seed=1, check_every=0)


def test_held_out_recall(model, dims):
    rng = np.random.default_rng(5)
    features = rng.standard_normal((4, dims.d_in)).astype(np.float32)
    held_out = HeldOutQueries(features, ["alpha beta", "gamma"], np.array([0, 3]))
    recall = held_out.recall_at_1(model)
    assert recall in (0.0, 0.5, 1.0)
    with pytest.raises(ContractError):
        HeldOutQueries(features, ["alpha"], np.array([0, 1]))
    with pytest.raises(ContractError):
        HeldOutQueries(features, ["alpha"], np.array([4]))
