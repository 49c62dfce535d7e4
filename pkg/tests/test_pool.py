import numpy as np
import pytest

from app.errors import ContractError, DegenerateVectorError, IngestError, MissingArtifactError, PoolLookupError
from app.pool import (
    PoolRecord,
    PoolStore,
    build_store,
    captions_for,
    cosine,
    escape_field,
    load_store,
    mix_pools,
    read_manifest,
    storage_report,
    top_k,
    unescape_field,
    write_manifest,
)
from app.tensor import row_dot
from tests.conftest import random_unit_rows


def _records(n: int, domain: str = "d", prefix: str = "") -> list[PoolRecord]:
    return [PoolRecord(f"{prefix}{i:05d}", domain, f"caption {i}") for i in range(n)]


def _naive_top_k(store: PoolStore, query: np.ndarray, k: int) -> list[str]:
    scores = row_dot(store.embeddings, query)
    pairs = sorted(zip(store.ids, scores), key=lambda pair: (-pair[1], pair[0]))
    return [item_id for item_id, _ in pairs[:k]]


def test_build_and_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((12, 5)).astype(np.float32) * 3.0
    features = rng.standard_normal((12, 7)).astype(np.float32)
    built = build_store(raw, _records(12), tmp_path / "pool.store", features=features)
    loaded = load_store(tmp_path / "pool.store")
    assert np.array_equal(built.embeddings, loaded.embeddings)
    assert loaded.records == built.records
    assert np.array_equal(loaded.features, features)
    assert np.allclose(np.linalg.norm(loaded.embeddings, axis=1), 1.0, atol=1e-5)


def test_build_keeps_unit_rows_bitwise(tmp_path):
    rows = random_unit_rows(np.random.default_rng(1), 8, 6)
    store = build_store(rows, _records(8), tmp_path / "p.store")
    assert np.array_equal(store.embeddings, rows)


def test_empty_store_and_degenerate_rows(tmp_path):
    empty = build_store(np.zeros((0,)), [], tmp_path / "empty.store", d_e=4)
    assert empty.count == 0
    with pytest.raises(ContractError):
        top_k(empty, np.ones(4, dtype=np.float32) / 2, 1)
    with pytest.raises(DegenerateVectorError):
        build_store(np.zeros((2, 3)), _records(2), tmp_path / "zero.store")


def test_store_rejects_bad_input():
    rows = random_unit_rows(np.random.default_rng(2), 2, 3)
    with pytest.raises(IngestError, match="duplicate"):
        PoolStore(rows, [PoolRecord("a", "d", ""), PoolRecord("a", "d", "")])
    with pytest.raises(IngestError):
        PoolStore(rows * 2.0, _records(2))
    with pytest.raises(IngestError):
        PoolStore(rows, _records(3))


def test_store_is_immutable_and_owns_its_data():
    rows = random_unit_rows(np.random.default_rng(3), 4, 3)
    store = PoolStore(rows, _records(4))
    with pytest.raises(ValueError):
        store.embeddings[0, 0] = 1.0
    rows[0] = 0.0
    assert np.any(store.embeddings[0])


def test_missing_store_files(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_store(tmp_path / "absent.store")


def test_manifest_escaping_round_trip(tmp_path):
    caption = "tab\there\nnew line and back\\slash"
    assert unescape_field(escape_field(caption)) == caption
    write_manifest(tmp_path / "m.tsv", [PoolRecord("x", "d", caption)])
    assert read_manifest(tmp_path / "m.tsv") == [PoolRecord("x", "d", caption)]


def test_cosine():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert cosine(np.array([0.6, 0.8]), np.array([0.6, 0.8])) == pytest.approx(1.0)


def test_query_equal_to_row_ranks_first():
    rows = random_unit_rows(np.random.default_rng(4), 50, 8)
    store = PoolStore(rows, _records(50))
    ranking = top_k(store, rows[17], 5)
    assert ranking.ids[0] == "00017"
    assert ranking.scores[0] == pytest.approx(1.0, abs=1e-6)


def test_ties_break_by_ascending_id():
    rows = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (4, 1))
    store = PoolStore(rows, [PoolRecord(i, "d", "") for i in ("c", "a", "d", "b")])
    assert top_k(store, np.array([1.0, 0.0], dtype=np.float32), 3).ids == ("a", "b", "c")


def test_k_above_count_returns_whole_pool():
    store = PoolStore(random_unit_rows(np.random.default_rng(5), 3, 4), _records(3))
    assert len(top_k(store, store.embeddings[0], 10)) == 3
    with pytest.raises(ContractError):
        top_k(store, store.embeddings[0], 0)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("k", [1, 5, 10, 16, 64])
def test_chunked_parallel_top_k_matches_full_sort(seed, k):
    rng = np.random.default_rng(seed)
    rows = random_unit_rows(rng, 10_000, 16)
    # duplicates force score ties across chunks
    rows[5000:5010] = rows[0]
    order = rng.permutation(10_000)
    store = PoolStore(rows, [PoolRecord(f"id{i:05d}", "d", "") for i in order])
    query = rows[0] if seed % 2 else random_unit_rows(rng, 1, 16)[0]
    result = top_k(store, query, k, chunk_size=1024, workers=4)
    assert list(result.ids) == _naive_top_k(store, query, k)
    assert top_k(store, query, k).ids == result.ids


def test_captions_and_lookup():
    store = PoolStore(random_unit_rows(np.random.default_rng(6), 3, 4), _records(3))
    assert captions_for(store, ["00002", "00000"]) == ["caption 2", "caption 0"]
    with pytest.raises(PoolLookupError):
        store.row("missing")


def test_mix_pools_prefixes_ids_and_keeps_features():
    rng = np.random.default_rng(7)
    a = PoolStore(random_unit_rows(rng, 3, 4), _records(3, "a"), rng.standard_normal((3, 6)))
    b = PoolStore(random_unit_rows(rng, 2, 4), _records(2, "b"), rng.standard_normal((2, 6)))
    mixed = mix_pools([a, b])
    assert mixed.count == 5
    assert mixed.ids[0] == "a/00000"
    assert mixed.ids[-1] == "b/00001"
    assert mixed.has_features
    assert mix_pools([a]) is a


def test_mix_pools_detects_collisions():
    rng = np.random.default_rng(8)
    a = PoolStore(random_unit_rows(rng, 1, 4), [PoolRecord("a/x", "a", "")])
    b = PoolStore(random_unit_rows(rng, 1, 4), [PoolRecord("x", "a", "")])
    with pytest.raises(IngestError, match="collision"):
        mix_pools([a, b])


def test_mixed_pool_never_improves_a_rank():
    rng = np.random.default_rng(9)
    a = PoolStore(random_unit_rows(rng, 30, 8), _records(30, "a"))
    b = PoolStore(random_unit_rows(rng, 300, 8), _records(300, "b"))
    mixed = mix_pools([a, b])
    for i in range(0, 30, 5):
        query = a.embeddings[i] + rng.standard_normal(8).astype(np.float32) * 0.3
        query = (query / np.linalg.norm(query)).astype(np.float32)
        alone = top_k(a, query, 30).rank_of(f"{i:05d}")
        together = top_k(mixed, query, mixed.count).rank_of(f"a/{i:05d}")
        assert together >= alone


def test_storage_report_matches_reference_arithmetic():
    report = storage_report(1_000_000, 768, 4, 30, 2)
    assert report.embedding_bytes_per_image == 3072
    assert report.caption_bytes_per_image == 60
    assert report.relative_overhead == 0.01953125
    assert report.lines()[-1] == "relative_overhead=0.01953125 (≈ 2%)"
    with pytest.raises(ContractError):
        storage_report(0, 768, 4, 30, 2)
