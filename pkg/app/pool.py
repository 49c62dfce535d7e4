import logging
import struct
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.errors import (
    ContractError,
    DegenerateVectorError,
    IngestError,
    MissingArtifactError,
    PoolLookupError,
    ShapeError,
)
from app.tensor import EPS_NORM, row_dot, row_sq_norms


logger = logging.getLogger(__name__)

POOL_MAGIC = b"EFSAPOOL"
FEATURE_MAGIC = b"EFSAFEAT"
STORE_FORMAT_VERSION = 1
UNIT_TOLERANCE = 1e-5
# rows within this distance of unit norm are ingested byte-for-byte
RENORMALIZE_ABOVE = 1e-6
DEFAULT_CHUNK = 16384


@dataclass(frozen=True)
class PoolRecord:
    id: str
    domain: str
    caption: str


@dataclass(frozen=True)
class RankedList:
    """(id, score) pairs, descending score, ties by ascending id."""

    ids: tuple[str, ...]
    scores: np.ndarray
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.ids)

    def head(self, k: int) -> "RankedList":
        return RankedList(self.ids[:k], self.scores[:k], self.rows[:k])

    def rank_of(self, item_id: str) -> int | None:
        """1-based rank, or None when the id is absent."""
        try:
            return self.ids.index(item_id) + 1
        except ValueError:
            return None

    def restricted_to(self, ids: Iterable[str]) -> "RankedList":
        keep = set(ids)
        positions = [i for i, item_id in enumerate(self.ids) if item_id in keep]
        return RankedList(
            tuple(self.ids[i] for i in positions),
            self.scores[positions],
            self.rows[positions] if len(self.rows) else self.rows,
        )


class PoolStore:
    """Immutable retrieval pool: unit-norm f32 embeddings plus a manifest row per embedding.

    `features` optionally carries the raw image features the embeddings were encoded
    from; episodes need them to re-encode candidates with an adapted vision tower.
    """

    def __init__(
        self,
        embeddings: np.ndarray,
        records: Sequence[PoolRecord],
        features: np.ndarray | None = None,
    ):
        embeddings = np.array(embeddings, dtype=np.float32)
        if embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be a matrix, got shape {embeddings.shape}")
        if len(records) != embeddings.shape[0]:
            raise IngestError(
                f"manifest has {len(records)} records for {embeddings.shape[0]} embeddings"
            )
        if features is not None and features.shape[0] != embeddings.shape[0]:
            raise IngestError(f"{features.shape[0]} feature rows for {embeddings.shape[0]} items")

        index: dict[str, int] = {}
        for row, record in enumerate(records):
            if record.id in index:
                raise IngestError(f"duplicate id: {record.id}")
            index[record.id] = row

        norms = np.sqrt(row_sq_norms(embeddings))
        off = np.abs(norms - 1.0) > UNIT_TOLERANCE
        if np.any(off):
            raise IngestError(f"{int(off.sum())} rows are not unit-norm")

        self.embeddings = embeddings
        self.embeddings.setflags(write=False)
        self.records = tuple(records)
        self.features = None if features is None else np.asarray(features, dtype=np.float32)
        self.index = index
        self._id_order = np.argsort(np.array([r.id for r in self.records], dtype=object), kind="stable")
        self.id_rank = np.empty(len(self.records), dtype=np.int64)
        self.id_rank[self._id_order] = np.arange(len(self.records))

    @property
    def count(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def d_e(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    @property
    def has_features(self) -> bool:
        return self.features is not None

    def row(self, item_id: str) -> int:
        try:
            return self.index[item_id]
        except KeyError:
            raise PoolLookupError(f"unknown pool id: {item_id}") from None

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.row(item_id) for item_id in ids], dtype=np.int64)

    def subset(self, rows: Sequence[int]) -> "PoolStore":
        rows = np.asarray(rows, dtype=np.int64)
        return PoolStore(
            self.embeddings[rows],
            [self.records[i] for i in rows],
            None if self.features is None else self.features[rows],
        )

    def domains(self) -> list[str]:
        return sorted({r.domain for r in self.records})


def escape_field(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def unescape_field(value: str) -> str:
    out = []
    chars = iter(value)
    for char in chars:
        if char != "\\":
            out.append(char)
            continue
        nxt = next(chars, "")
        out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, "\\" + nxt))
    return "".join(out)


def _write_matrix(path: Path, magic: bytes, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as file:
        file.write(magic)
        file.write(struct.pack("<IIQ", STORE_FORMAT_VERSION, matrix.shape[1], matrix.shape[0]))
        file.write(matrix.tobytes())


def _read_matrix(path: Path, magic: bytes, artifact: str) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(artifact, path)
    payload = path.read_bytes()
    if payload[: len(magic)] != magic:
        raise ContractError(f"{path} is not a {artifact} file")
    version, dim, count = struct.unpack_from("<IIQ", payload, len(magic))
    if version != STORE_FORMAT_VERSION:
        raise ContractError(f"unsupported {artifact} format version {version}")
    offset = len(magic) + struct.calcsize("<IIQ")
    data = np.frombuffer(payload, dtype="<f4", count=dim * count, offset=offset)
    return data.reshape(count, dim).astype(np.float32)


def write_features(path: Path, features: np.ndarray) -> Path:
    path = Path(path)
    _write_matrix(path, FEATURE_MAGIC, features)
    return path


def read_features(path: Path) -> np.ndarray:
    return _read_matrix(Path(path), FEATURE_MAGIC, "features")


def write_manifest(path: Path, records: Iterable[PoolRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "\t".join(escape_field(v) for v in (r.id, r.domain, r.caption)) for r in records
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def read_manifest(path: Path) -> list[PoolRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError("manifest", path)
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise IngestError(f"{path}:{number}: expected 3 tab-separated fields, got {len(parts)}")
        records.append(PoolRecord(*(unescape_field(p) for p in parts)))
    return records


def store_paths(path: Path) -> tuple[Path, Path, Path]:
    """(store file, manifest, feature file) for a store path."""
    path = Path(path)
    return path, path.with_suffix(".tsv"), path.with_suffix(".feat")


def _ingest_rows(embeddings: np.ndarray) -> np.ndarray:
    rows = np.asarray(embeddings, dtype=np.float32).copy()
    if rows.shape[0] == 0:
        return rows
    norms = np.sqrt(row_sq_norms(rows))
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError(f"{int(np.sum(norms <= EPS_NORM))} zero rows in pool ingest")
    fix = np.abs(norms - 1.0) > RENORMALIZE_ABOVE
    if np.any(fix):
        rows[fix] = (rows[fix].astype(np.float64) / norms[fix, None]).astype(np.float32)
    return rows


def build_store(
    embeddings: np.ndarray,
    manifest: Sequence[PoolRecord],
    path: Path,
    features: np.ndarray | None = None,
    d_e: int | None = None,
) -> PoolStore:
    """Normalizes rows that are not already unit-norm and writes the store files."""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2:
        if embeddings.size == 0 and d_e is not None:
            embeddings = embeddings.reshape(0, d_e)
        else:
            raise ShapeError(f"embeddings must be a matrix, got {embeddings.shape}")
    if d_e is not None and embeddings.shape[1] != d_e:
        raise ShapeError(f"embedding dimension {embeddings.shape[1]} != {d_e}")
    store = PoolStore(_ingest_rows(embeddings), manifest, features)

    store_file, manifest_file, feature_file = store_paths(path)
    _write_matrix(store_file, POOL_MAGIC, store.embeddings)
    write_manifest(manifest_file, store.records)
    if store.features is not None:
        write_features(feature_file, store.features)
    logger.info("Built pool store %s: count=%s d_e=%s", store_file, store.count, store.d_e)
    return store


def load_store(path: Path, with_features: bool = True) -> PoolStore:
    store_file, manifest_file, feature_file = store_paths(path)
    embeddings = _read_matrix(store_file, POOL_MAGIC, "pool store")
    records = read_manifest(manifest_file)
    features = read_features(feature_file) if with_features and feature_file.exists() else None
    return PoolStore(embeddings, records, features)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of unit vectors, accumulated in f64."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    return float(row_dot(u.reshape(1, -1), v)[0])


def pool_scores(store: PoolStore, query: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (store.d_e,):
        raise ShapeError(f"query dimension {query.shape} != ({store.d_e},)")
    return row_dot(store.embeddings, query)


def _best(scores: np.ndarray, tiebreak: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best entries by (score desc, tiebreak asc)."""
    positions = np.arange(scores.shape[0])
    if scores.shape[0] > k:
        threshold = np.partition(scores, scores.shape[0] - k)[scores.shape[0] - k]
        positions = np.flatnonzero(scores >= threshold)
    order = np.lexsort((tiebreak[positions], -scores[positions]))[:k]
    return positions[order]


def rank_rows(store: PoolStore, rows: np.ndarray, scores: np.ndarray) -> RankedList:
    """Sorts the given rows by (score desc, id asc)."""
    order = np.lexsort((store.id_rank[rows], -scores))
    rows = rows[order]
    return RankedList(tuple(store.records[i].id for i in rows), scores[order], rows)


def top_k(
    store: PoolStore,
    query: np.ndarray,
    k: int,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> RankedList:
    """Exact cosine top-k by chunked scan; chunks may run in parallel, merge is deterministic."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if store.count == 0:
        raise ContractError("top_k over an empty pool")
    k = min(k, store.count)
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (store.d_e,):
        raise ShapeError(f"query dimension {query.shape} != ({store.d_e},)")

    starts = range(0, store.count, chunk_size)

    def _scan(start: int) -> tuple[np.ndarray, np.ndarray]:
        stop = min(start + chunk_size, store.count)
        scores = row_dot(store.embeddings[start:stop], query)
        best = _best(scores, store.id_rank[start:stop], k)
        return best + start, scores[best]

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(_scan, starts))
    else:
        parts = [_scan(start) for start in starts]

    rows = np.concatenate([p[0] for p in parts])
    scores = np.concatenate([p[1] for p in parts])
    best = _best(scores, store.id_rank[rows], k)
    return rank_rows(store, rows[best], scores[best])


def captions_for(store: PoolStore, ids: Sequence[str]) -> list[str]:
    return [store.records[store.row(item_id)].caption for item_id in ids]


def _prefixed(record: PoolRecord) -> str:
    prefix = f"{record.domain}/"
    return record.id if record.id.startswith(prefix) else prefix + record.id


def mix_pools(stores: Sequence[PoolStore]) -> PoolStore:
    """Concatenates stores; ids not already carrying their domain prefix get one."""
    if not stores:
        raise ContractError("mix_pools needs at least one store")
    if len(stores) == 1:
        return stores[0]
    d_e = stores[0].d_e
    if any(store.d_e != d_e for store in stores):
        raise ShapeError("stores disagree on embedding dimension")

    records: list[PoolRecord] = []
    seen: set[str] = set()
    for store in stores:
        for record in store.records:
            item_id = _prefixed(record)
            if item_id in seen:
                raise IngestError(f"id collision after prefixing: {item_id}")
            seen.add(item_id)
            records.append(PoolRecord(item_id, record.domain, record.caption))

    features = None
    if all(store.has_features for store in stores):
        widths = {store.features.shape[1] for store in stores}
        if len(widths) == 1:
            features = np.concatenate([store.features for store in stores])
    if features is None:
        logger.warning("Mixed pool has no image features; image-side adaptation is disabled")
    embeddings = np.concatenate([store.embeddings for store in stores])
    return PoolStore(embeddings, records, features)


@dataclass(frozen=True)
class StorageReport:
    pool_size: int
    embedding_bytes_per_image: float
    caption_bytes_per_image: float
    embedding_bytes: float
    caption_bytes: float
    relative_overhead: float

    def lines(self) -> list[str]:
        return [
            f"pool_size={self.pool_size}",
            f"embedding_bytes_per_image={self.embedding_bytes_per_image:g}",
            f"caption_bytes_per_image={self.caption_bytes_per_image:g}",
            f"embedding_bytes={self.embedding_bytes:g}",
            f"caption_bytes={self.caption_bytes:g}",
            f"relative_overhead={self.relative_overhead:.8f} (≈ {self.relative_overhead * 100:.0f}%)",
        ]


def storage_report(
    pool_size: int,
    d_e: int,
    bytes_per_scalar: float,
    avg_caption_tokens: float,
    bytes_per_token: float,
) -> StorageReport:
    if min(pool_size, d_e, bytes_per_scalar, avg_caption_tokens, bytes_per_token) <= 0:
        raise ContractError("storage report inputs must be positive")
    per_image = d_e * bytes_per_scalar
    per_caption = avg_caption_tokens * bytes_per_token
    return StorageReport(
        pool_size=pool_size,
        embedding_bytes_per_image=per_image,
        caption_bytes_per_image=per_caption,
        embedding_bytes=pool_size * per_image,
        caption_bytes=pool_size * per_caption,
        relative_overhead=per_caption / per_image,
    )
