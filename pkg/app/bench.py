"""Synthetic multi-domain retrieval benchmark with hard-negative groups.

Every domain is a cluster around its own signature vector. Items inside a
domain come in hard groups: members share the signature and every detail
attribute except one. Open-domain distractors are drawn around their own
random signatures and reuse the attribute vocabulary, so they compete with
every domain in the mixed pool.
"""

import hashlib
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.encoders import DualEncoder, FeatureVector, embed
from app.engine import HeldOutQueries, PairedDataset
from app.errors import ConfigError, ContractError, IngestError, MissingArtifactError
from app.pool import (
    PoolRecord,
    PoolStore,
    RankedList,
    escape_field,
    rank_rows,
    read_features,
    read_manifest,
    unescape_field,
    write_features,
    write_manifest,
)


logger = logging.getLogger(__name__)

OPEN_DOMAIN = "open"
GROUP_BONUS = 0.5

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

CAPTION_TEMPLATES = (
    "a {domain} photo of {attrs}",
    "{attrs} shown in a {domain} image",
    "close view of {attrs} from the {domain} set",
)
QUERY_TEMPLATES = (
    "find {attrs} in {domain}",
    "show me the {domain} picture with {attrs}",
    "which {domain} shot has {attrs}",
)

BENCH_FILES = {
    "config": "bench.conf",
    "features": "pool.feat",
    "manifest": "pool.tsv",
    "latents": "latents.tsv",
    "queries": "queries.tsv",
    "train_features": "train.feat",
    "train_captions": "train.tsv",
    "held_out_features": "held_out.feat",
    "held_out_queries": "held_out.tsv",
}


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_domains: int = Field(default=4, ge=1)
    items_per_domain: int = Field(default=400, ge=1)
    hard_group_size: int = Field(default=2, ge=2)
    n_slots: int = Field(default=3, ge=1)
    vocab_size: int = Field(default=12, ge=1)
    d_in: int = Field(default=256, ge=1)
    sigma: float = Field(default=0.6, ge=0.0)
    n_queries: int = Field(default=50, ge=1)
    n_distractors: int = Field(default=20000, ge=0)
    n_train: int = Field(default=4000, ge=1)
    caption_dropout: float = Field(default=0.25, ge=0.0, lt=1.0)
    attribute_scale: float = Field(default=1.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _validate_layout(self) -> "BenchConfig":
        if self.vocab_size < self.hard_group_size:
            raise ValueError("vocab_size must be >= hard_group_size")
        if self.items_per_domain % self.hard_group_size:
            raise ValueError("items_per_domain must be a multiple of hard_group_size")
        if self.items_per_domain * 2 > self.vocab_size**self.n_slots:
            raise ValueError("attribute space too small for unique items per domain")
        if self.n_queries > self.items_per_domain:
            raise ValueError("n_queries must be <= items_per_domain")
        return self


@dataclass(frozen=True)
class Latent:
    domain: str
    group: str
    slots: tuple[int, ...]


@dataclass(frozen=True)
class GenItem:
    id: str
    domain: str
    latent: Latent
    image: FeatureVector
    caption: str
    query: str = ""


@dataclass(frozen=True)
class BenchQuery:
    id: str
    domain: str
    ground_truth: str
    text: str


@dataclass
class Benchmark:
    config: BenchConfig
    items: list[GenItem]
    queries: list[BenchQuery]
    train: PairedDataset
    held_out: HeldOutQueries | None = None

    @property
    def features(self) -> np.ndarray:
        return np.stack([item.image.values for item in self.items]).astype(np.float32)

    @property
    def records(self) -> list[PoolRecord]:
        return [PoolRecord(item.id, item.domain, item.caption) for item in self.items]

    @property
    def latents(self) -> dict[str, Latent]:
        return {item.id: item.latent for item in self.items}

    @property
    def domains(self) -> list[str]:
        return sorted({item.domain for item in self.items} - {OPEN_DOMAIN})

    def item(self, item_id: str) -> GenItem:
        for item in self.items:
            if item.id == item_id:
                return item
        raise ContractError(f"unknown benchmark item: {item_id}")

    def domain_rows(self, domain: str) -> np.ndarray:
        return np.array([i for i, item in enumerate(self.items) if item.domain == domain], dtype=np.int64)

    def queries_for(self, domain: str) -> list[BenchQuery]:
        return [q for q in self.queries if q.domain == domain]

    def pool(self, model: DualEncoder, domain: str | None = None) -> PoolStore:
        """Encodes pool features with the base vision tower; `domain` selects a single-domain pool."""
        features = self.features
        records = self.records
        if domain is not None:
            rows = self.domain_rows(domain)
            features = features[rows]
            records = [records[i] for i in rows]
        return PoolStore(embed(model.vision, features), records, features)


@dataclass(frozen=True)
class _Vocabulary:
    domain_words: tuple[str, ...]
    open_word: str
    attribute_words: tuple[tuple[str, ...], ...]


def _make_words(rng: np.random.Generator, count: int, syllables: int = 3) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _vocabulary(cfg: BenchConfig) -> _Vocabulary:
    rng = np.random.default_rng([cfg.seed, 0])
    words = _make_words(rng, cfg.n_domains + 1 + cfg.n_slots * cfg.vocab_size)
    domain_words = tuple(words[: cfg.n_domains])
    attribute = words[cfg.n_domains + 1 :]
    return _Vocabulary(
        domain_words=domain_words,
        open_word=words[cfg.n_domains],
        attribute_words=tuple(
            tuple(attribute[s * cfg.vocab_size : (s + 1) * cfg.vocab_size]) for s in range(cfg.n_slots)
        ),
    )


def _unit_gaussian(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(shape[-1])


@dataclass(frozen=True)
class _Geometry:
    signatures: np.ndarray
    attributes: np.ndarray

    @classmethod
    def draw(cls, cfg: BenchConfig) -> "_Geometry":
        rng = np.random.default_rng([cfg.seed, 1])
        return cls(
            signatures=_unit_gaussian(rng, cfg.n_domains, cfg.d_in),
            attributes=_unit_gaussian(rng, cfg.n_slots, cfg.vocab_size, cfg.d_in),
        )

    def feature(
        self,
        cfg: BenchConfig,
        signature: np.ndarray,
        slots: Sequence[int],
        rng: np.random.Generator,
    ) -> np.ndarray:
        detail = sum(self.attributes[s, v] for s, v in enumerate(slots))
        values = signature + cfg.attribute_scale * detail / np.sqrt(cfg.n_slots)
        if cfg.sigma > 0:
            values = values + cfg.sigma * _unit_gaussian(rng, cfg.d_in)
        return values.astype(np.float32)


def _describe(
    template: str,
    domain_word: str,
    words: Sequence[str],
) -> str:
    return template.format(domain=domain_word, attrs=" ".join(words))


def _caption(
    cfg: BenchConfig,
    vocab: _Vocabulary,
    domain_word: str,
    slots: Sequence[int],
    keep: int | None,
    rng: np.random.Generator,
) -> str:
    words = []
    for s, v in enumerate(slots):
        # the group's distinguishing attribute survives dropout
        if s == keep or rng.random() >= cfg.caption_dropout:
            words.append(vocab.attribute_words[s][v])
    template = CAPTION_TEMPLATES[rng.integers(len(CAPTION_TEMPLATES))]
    return _describe(template, domain_word, words)


def _query(vocab: _Vocabulary, domain_word: str, slots: Sequence[int], rng: np.random.Generator) -> str:
    words = [vocab.attribute_words[s][v] for s, v in enumerate(slots)][::-1]
    template = QUERY_TEMPLATES[rng.integers(len(QUERY_TEMPLATES))]
    return _describe(template, domain_word, words)


def _domain_items(
    cfg: BenchConfig,
    vocab: _Vocabulary,
    geometry: _Geometry,
    d: int,
    stream: int = 2,
) -> list[GenItem]:
    rng = np.random.default_rng([cfg.seed, stream, d])
    domain = f"dom{d}"
    seen: set[tuple[int, ...]] = set()
    items: list[GenItem] = []
    for g in range(cfg.items_per_domain // cfg.hard_group_size):
        while True:
            base = rng.integers(cfg.vocab_size, size=cfg.n_slots)
            diff_slot = int(rng.integers(cfg.n_slots))
            values = rng.choice(cfg.vocab_size, size=cfg.hard_group_size, replace=False)
            members = []
            for value in values:
                slots = base.copy()
                slots[diff_slot] = value
                members.append(tuple(int(v) for v in slots))
            if not seen.intersection(members):
                break
        seen.update(members)
        group = f"{domain}/g{g:04d}"
        for slots in members:
            item_id = f"{domain}/{len(items):05d}"
            items.append(
                GenItem(
                    id=item_id,
                    domain=domain,
                    latent=Latent(domain, group, slots),
                    image=FeatureVector(geometry.feature(cfg, geometry.signatures[d], slots, rng), "image-synthetic"),
                    caption=_caption(cfg, vocab, vocab.domain_words[d], slots, diff_slot, rng),
                    query=_query(vocab, vocab.domain_words[d], slots, rng),
                )
            )
    return items


def _distractor(cfg: BenchConfig, vocab: _Vocabulary, geometry: _Geometry, i: int) -> GenItem:
    # per-index stream: a larger distractor set extends a smaller one
    rng = np.random.default_rng([cfg.seed, 3, i])
    slots = tuple(int(v) for v in rng.integers(cfg.vocab_size, size=cfg.n_slots))
    signature = _unit_gaussian(rng, cfg.d_in)
    return GenItem(
        id=f"{OPEN_DOMAIN}/{i:06d}",
        domain=OPEN_DOMAIN,
        latent=Latent(OPEN_DOMAIN, "", slots),
        image=FeatureVector(geometry.feature(cfg, signature, slots, rng), "image-synthetic"),
        caption=_caption(cfg, vocab, vocab.open_word, slots, None, rng),
    )


def _train_split(cfg: BenchConfig, vocab: _Vocabulary, geometry: _Geometry) -> PairedDataset:
    rng = np.random.default_rng([cfg.seed, 4])
    features = np.empty((cfg.n_train, cfg.d_in), dtype=np.float32)
    captions: list[str] = []
    for i in range(cfg.n_train):
        d = int(rng.integers(cfg.n_domains + 1))
        slots = tuple(int(v) for v in rng.integers(cfg.vocab_size, size=cfg.n_slots))
        if d == cfg.n_domains:
            signature, word = _unit_gaussian(rng, cfg.d_in), vocab.open_word
        else:
            signature, word = geometry.signatures[d], vocab.domain_words[d]
        features[i] = geometry.feature(cfg, signature, slots, rng)
        captions.append(_caption(cfg, vocab, word, slots, None, rng))
    return PairedDataset(features=features, captions=captions)


def _held_out(
    cfg: BenchConfig,
    vocab: _Vocabulary,
    geometry: _Geometry,
    background: np.ndarray,
) -> HeldOutQueries:
    """Fresh items for every domain, queried against themselves plus the open-domain distractors."""
    own: list[np.ndarray] = []
    texts: list[str] = []
    targets: list[int] = []
    for d in range(cfg.n_domains):
        domain_items = _domain_items(cfg, vocab, geometry, d, stream=6)
        picks = np.sort(
            np.random.default_rng([cfg.seed, 7, d]).choice(len(domain_items), size=cfg.n_queries, replace=False)
        )
        targets.extend(len(own) + int(pick) for pick in picks)
        texts.extend(domain_items[int(pick)].query for pick in picks)
        own.extend(item.image.values for item in domain_items)
    features = np.concatenate([np.stack(own), background.reshape(-1, cfg.d_in)]).astype(np.float32)
    return HeldOutQueries(features=features, queries=texts, targets=np.array(targets))


def generate(cfg: BenchConfig) -> Benchmark:
    vocab = _vocabulary(cfg)
    geometry = _Geometry.draw(cfg)

    items: list[GenItem] = []
    queries: list[BenchQuery] = []
    for d in range(cfg.n_domains):
        domain_items = _domain_items(cfg, vocab, geometry, d)
        items.extend(domain_items)
        picks = np.sort(
            np.random.default_rng([cfg.seed, 5, d]).choice(len(domain_items), size=cfg.n_queries, replace=False)
        )
        for j, pick in enumerate(picks):
            target = domain_items[int(pick)]
            queries.append(BenchQuery(f"q-dom{d}-{j:04d}", target.domain, target.id, target.query))
    distractors = [_distractor(cfg, vocab, geometry, i) for i in range(cfg.n_distractors)]
    items.extend(distractors)
    background = np.array([item.image.values for item in distractors], dtype=np.float32)

    logger.info(
        "Generated benchmark: domains=%s items=%s distractors=%s queries=%s train=%s",
        cfg.n_domains,
        len(items) - cfg.n_distractors,
        cfg.n_distractors,
        len(queries),
        cfg.n_train,
    )
    return Benchmark(
        config=cfg,
        items=items,
        queries=queries,
        train=_train_split(cfg, vocab, geometry),
        held_out=_held_out(cfg, vocab, geometry, background),
    )


def oracle_scores(query_latent: Latent, latents: Sequence[Latent]) -> np.ndarray:
    scores = np.empty(len(latents), dtype=np.float64)
    for i, latent in enumerate(latents):
        score = float(latent.domain == query_latent.domain)
        score += sum(a == b for a, b in zip(latent.slots, query_latent.slots))
        if latent.group and latent.group == query_latent.group:
            score += GROUP_BONUS
        scores[i] = score
    return scores


def oracle_rank(item: GenItem | str, pool: PoolStore, latents: Mapping[str, Latent]) -> RankedList:
    """Ranks the pool by latent-attribute overlap with the query's target item."""
    target = item if isinstance(item, str) else item.id
    if target not in latents:
        raise ContractError(f"no generative latents for {target}")
    missing = [record.id for record in pool.records if record.id not in latents]
    if missing:
        raise ContractError(f"no generative latents for {len(missing)} pool items, e.g. {missing[0]}")
    scores = oracle_scores(latents[target], [latents[record.id] for record in pool.records])
    return rank_rows(pool, np.arange(pool.count), scores)


def _write_lines(path: Path, lines: Sequence[str]) -> Path:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def write_benchmark(bench: Benchmark, directory: Path) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / filename for name, filename in BENCH_FILES.items()}

    _write_lines(paths["config"], [f"{k}={v}" for k, v in sorted(bench.config.model_dump().items())])
    write_features(paths["features"], bench.features)
    write_manifest(paths["manifest"], bench.records)
    _write_lines(
        paths["latents"],
        [
            f"{item.id}\t{item.domain}\t{item.latent.group}\t{','.join(map(str, item.latent.slots))}"
            for item in bench.items
        ],
    )
    _write_lines(
        paths["queries"],
        [f"{q.id}\t{q.domain}\t{q.ground_truth}\t{escape_field(q.text)}" for q in bench.queries],
    )
    write_features(paths["train_features"], bench.train.features)
    _write_lines(paths["train_captions"], [escape_field(c) for c in bench.train.captions])
    if bench.held_out is None:
        for name in ("held_out_features", "held_out_queries"):
            paths.pop(name)
    else:
        # the open-domain tail of the held-out pool is the benchmark's own distractor set
        own = bench.config.n_domains * bench.config.items_per_domain
        write_features(paths["held_out_features"], bench.held_out.features[:own])
        _write_lines(
            paths["held_out_queries"],
            [f"{row}\t{escape_field(text)}" for row, text in zip(bench.held_out.targets, bench.held_out.queries)],
        )
    return paths


def _read_lines(path: Path, artifact: str) -> list[str]:
    if not path.exists():
        raise MissingArtifactError(artifact, path)
    return path.read_text(encoding="utf-8").splitlines()


def read_queries(path: Path) -> list[BenchQuery]:
    queries = []
    for n, line in enumerate(_read_lines(Path(path), "query file"), start=1):
        fields = line.split("\t")
        if len(fields) != 4:
            raise IngestError(f"{path}:{n}: expected 4 fields, got {len(fields)}")
        queries.append(BenchQuery(fields[0], fields[1], fields[2], unescape_field(fields[3])))
    return queries


def read_benchmark(directory: Path) -> Benchmark:
    directory = Path(directory)
    paths = {name: directory / filename for name, filename in BENCH_FILES.items()}

    settings = dict(
        line.split("=", 1) for line in _read_lines(paths["config"], "benchmark config") if "=" in line
    )
    try:
        cfg = BenchConfig(**settings)
    except ValueError as exc:
        raise ConfigError(f"{paths['config']}: {exc}") from exc

    features = read_features(paths["features"])
    records = read_manifest(paths["manifest"])
    latents: dict[str, Latent] = {}
    for line in _read_lines(paths["latents"], "latent file"):
        item_id, domain, group, slots = line.split("\t")
        latents[item_id] = Latent(domain, group, tuple(int(v) for v in slots.split(",") if v))
    queries = read_queries(paths["queries"])
    query_text = {q.ground_truth: q.text for q in queries}

    if len(records) != features.shape[0]:
        raise IngestError(f"{len(records)} manifest rows for {features.shape[0]} feature rows")
    unknown = [record.id for record in records if record.id not in latents]
    if unknown:
        raise IngestError(f"{len(unknown)} manifest ids have no latents, e.g. {unknown[0]}")
    items = [
        GenItem(
            id=record.id,
            domain=record.domain,
            latent=latents[record.id],
            image=FeatureVector(features[i], "image-synthetic"),
            caption=record.caption,
            query=query_text.get(record.id, ""),
        )
        for i, record in enumerate(records)
    ]
    train = PairedDataset(
        features=read_features(paths["train_features"]),
        captions=[unescape_field(c) for c in _read_lines(paths["train_captions"], "train captions")],
    )
    held_out = None
    if paths["held_out_features"].exists():
        rows, texts = [], []
        for n, line in enumerate(_read_lines(paths["held_out_queries"], "held-out queries"), start=1):
            fields = line.split("\t")
            if len(fields) != 2:
                raise IngestError(f"{paths['held_out_queries']}:{n}: expected 2 fields, got {len(fields)}")
            rows.append(int(fields[0]))
            texts.append(unescape_field(fields[1]))
        background = features[[i for i, record in enumerate(records) if record.domain == OPEN_DOMAIN]]
        held_out = HeldOutQueries(
            features=np.concatenate([read_features(paths["held_out_features"]), background]).astype(np.float32),
            queries=texts,
            targets=np.array(rows),
        )
    return Benchmark(config=cfg, items=items, queries=queries, train=train, held_out=held_out)


def digest(paths: Mapping[str, Path]) -> str:
    sha = hashlib.sha256()
    for name in sorted(paths):
        sha.update(name.encode("utf-8"))
        sha.update(Path(paths[name]).read_bytes())
    return sha.hexdigest()
