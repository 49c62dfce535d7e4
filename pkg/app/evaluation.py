"""Recall@k reports for the zero-shot, fine-tuned, caption-matching and episodic methods."""

import logging
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from app.bench import Benchmark, BenchQuery
from app.encoders import DualEncoder
from app.engine import (
    CaptionIndex,
    EpisodeRunner,
    PoolRanker,
    embed_query,
    finetune_baseline,
    t2t_rank,
    zero_shot_rank,
)
from app.errors import ContractError
from app.losses import LossConfig
from app.observability import log_event
from app.pool import PoolStore, RankedList
from app.state import EpisodeConfig, EpisodeResult


logger = logging.getLogger(__name__)

Method = Literal["ZS", "FT", "T2T", "EFSA"]
Setting = Literal["single", "multi"]

METHODS: tuple[Method, ...] = ("ZS", "FT", "T2T", "EFSA")
SETTINGS: tuple[Setting, ...] = ("single", "multi")
RECALL_KS = (1, 5, 10)
AVERAGE = "average"
MIXED_POOL = "*"


def recall_at_k(
    rankings: Mapping[str, RankedList],
    ground_truth: Mapping[str, str],
    ks: Sequence[int] = RECALL_KS,
) -> dict[int, float]:
    """Fraction of queries whose ground truth sits within the first k entries."""
    if not rankings:
        return {k: 0.0 for k in ks}
    hits = {k: 0 for k in ks}
    for query_id, ranking in rankings.items():
        if query_id not in ground_truth:
            raise ContractError(f"no ground truth for query {query_id}")
        rank = ranking.rank_of(ground_truth[query_id])
        for k in ks:
            if rank is not None and rank <= k:
                hits[k] += 1
    return {k: hits[k] / len(rankings) for k in ks}


def containment_holds(
    post: Mapping[str, RankedList],
    pre: Mapping[str, RankedList],
    ground_truth: Mapping[str, str],
    k: int,
    ks: Sequence[int] = RECALL_KS,
) -> bool:
    """Episodic R@c never exceeds the initial retrieval's R@k, for every cutoff c."""
    bound = recall_at_k(pre, ground_truth, [k])[k]
    after = recall_at_k(post, ground_truth, ks)
    return all(after[c] <= bound for c in ks)


@dataclass(frozen=True)
class RecallRow:
    domain: str
    method: str
    r1: float
    r5: float
    r10: float

    def csv(self) -> str:
        return f"{self.domain},{self.method},{self.r1:.4f},{self.r5:.4f},{self.r10:.4f}"


@dataclass
class RecallReport:
    setting: str
    rows: list[RecallRow] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    latency: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(row.method for row in self.rows))

    def averages(self) -> list[RecallRow]:
        """Unweighted mean over domains, one row per method."""
        out = []
        for method in self.methods:
            rows = [row for row in self.rows if row.method == method]
            out.append(
                RecallRow(
                    AVERAGE,
                    method,
                    float(np.mean([r.r1 for r in rows])),
                    float(np.mean([r.r5 for r in rows])),
                    float(np.mean([r.r10 for r in rows])),
                )
            )
        return out

    def average(self, method: str) -> RecallRow:
        for row in self.averages():
            if row.method == method:
                return row
        raise ContractError(f"no rows for method {method}")

    def row(self, domain: str, method: str) -> RecallRow:
        for row in self.rows:
            if row.domain == domain and row.method == method:
                return row
        raise ContractError(f"no row for ({domain}, {method})")

    def to_csv(self) -> str:
        lines = ["domain,method,r1,r5,r10"]
        lines.extend(row.csv() for row in self.rows)
        lines.extend(row.csv() for row in self.averages())
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        lines = [
            f"setting={self.setting} domain={row.domain} method={row.method} "
            f"r1={row.r1:.4f} r5={row.r5:.4f} r10={row.r10:.4f}"
            for row in self.rows + self.averages()
        ]
        lines.extend(f"setting={self.setting} meta.{key}={value}" for key, value in sorted(self.metadata.items()))
        return "\n".join(lines) + "\n"

    def latency_lines(self) -> list[str]:
        return [
            f"method={method} mean_s={mean:.6f} max_s={peak:.6f}"
            for method, (mean, peak) in sorted(self.latency.items())
        ]


def write_report(report: RecallReport, directory: Path, stem: str) -> tuple[Path, Path]:
    """Writes `<stem>.csv` and `<stem>.records`; latency goes to its own file so reports stay reproducible."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    records_path = directory / f"{stem}.records"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    records_path.write_text(report.to_records(), encoding="utf-8")
    if report.latency:
        (directory / f"{stem}.latency").write_text(
            "\n".join(report.latency_lines()) + "\n", encoding="utf-8"
        )
    log_event("report.written", {"setting": report.setting, "csv": str(csv_path), "rows": len(report.rows)})
    return csv_path, records_path


@dataclass
class MethodRun:
    rankings: dict[str, RankedList]
    seconds: list[float]
    episodes: list[EpisodeResult] = field(default_factory=list)


class SuiteRunner:
    """Evaluates methods over a benchmark's single-domain or mixed pools.

    Pools, caption indexes and fine-tuned baselines are built once and reused
    across methods and ablation variants.
    """

    def __init__(
        self,
        bench: Benchmark,
        model: DualEncoder,
        cfg: EpisodeConfig,
        threads: int = 1,
        ft_epochs: int = 4,
        ft_batch_size: int = 64,
        pools: Mapping[str, PoolStore] | None = None,
    ):
        if threads < 1:
            raise ContractError(f"threads must be >= 1, got {threads}")
        self.bench = bench
        self.model = model
        self.cfg = cfg
        self.threads = threads
        self.ft_epochs = ft_epochs
        self.ft_batch_size = ft_batch_size
        self.runner = EpisodeRunner()
        # keyed by domain for single-domain pools, MIXED_POOL for the mixed pool
        self._pools: dict[str, PoolStore] = dict(pools or {})
        self._captions: dict[int, CaptionIndex] = {}
        self._finetuned: dict[int, PoolRanker] = {}

    def pool(self, setting: Setting, domain: str) -> PoolStore:
        key = domain if setting == "single" else MIXED_POOL
        if key not in self._pools:
            self._pools[key] = self.bench.pool(self.model, None if key == MIXED_POOL else domain)
            logger.info("Indexed %s pool for %s: %s items", setting, domain, self._pools[key].count)
        return self._pools[key]

    def _timed(self, queries: Sequence[BenchQuery], rank: Callable[[BenchQuery], RankedList]) -> MethodRun:
        rankings, seconds = {}, []
        for query in queries:
            started = time.perf_counter()
            rankings[query.id] = rank(query)
            seconds.append(time.perf_counter() - started)
        return MethodRun(rankings, seconds)

    def zero_shot(self, pool: PoolStore, queries: Sequence[BenchQuery]) -> MethodRun:
        depth = max(RECALL_KS)
        return self._timed(
            queries, lambda q: zero_shot_rank(pool, embed_query(self.model, q.text)).head(depth)
        )

    def caption_match(self, pool: PoolStore, queries: Sequence[BenchQuery]) -> MethodRun:
        if id(pool) not in self._captions:
            self._captions[id(pool)] = CaptionIndex.build(pool, self.model)
        index = self._captions[id(pool)]
        depth = max(RECALL_KS)
        return self._timed(queries, lambda q: t2t_rank(pool, q.text, self.model, index).head(depth))

    def finetuned(self, pool: PoolStore, queries: Sequence[BenchQuery]) -> MethodRun:
        if id(pool) not in self._finetuned:
            adapted = finetune_baseline(pool, self.model, self.cfg, self.ft_epochs, self.ft_batch_size)
            self._finetuned[id(pool)] = adapted.ranker(pool)
        ranker = self._finetuned[id(pool)]
        depth = max(RECALL_KS)
        return self._timed(queries, lambda q: ranker.rank(q.text).head(depth))

    def episodic(
        self,
        pool: PoolStore,
        queries: Sequence[BenchQuery],
        cfg: EpisodeConfig | None = None,
        full_tuning: bool = False,
    ) -> MethodRun:
        cfg = cfg or self.cfg

        def _episode(query: BenchQuery) -> EpisodeResult:
            return self.runner.run(pool, query.text, cfg, self.model, query_id=query.id, full_tuning=full_tuning)

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                results = list(executor.map(_episode, queries))
        else:
            results = [_episode(query) for query in queries]

        aborted = sum(r.aborted for r in results)
        if aborted:
            logger.warning("%s of %s episodes aborted and fell back to zero-shot order", aborted, len(results))
        return MethodRun(
            rankings={r.query_id: r.post_ranking for r in results},
            seconds=[r.wall_time for r in results],
            episodes=results,
        )

    def run_method(self, method: Method, pool: PoolStore, queries: Sequence[BenchQuery]) -> MethodRun:
        if method == "ZS":
            return self.zero_shot(pool, queries)
        if method == "T2T":
            return self.caption_match(pool, queries)
        if method == "FT":
            return self.finetuned(pool, queries)
        if method == "EFSA":
            return self.episodic(pool, queries)
        raise ContractError(f"unknown method {method!r}")

    def report(
        self,
        setting: Setting,
        variants: Mapping[str, Callable[[PoolStore, Sequence[BenchQuery]], MethodRun]],
        episode_k: int | None = None,
    ) -> RecallReport:
        """One row per (domain, variant). `episode_k` enables the containment check for episodic variants."""
        report = RecallReport(setting=setting)
        ground_truth = {q.id: q.ground_truth for q in self.bench.queries}
        seconds: dict[str, list[float]] = {name: [] for name in variants}
        containment = True
        for domain in self.bench.domains:
            pool = self.pool(setting, domain)
            queries = self.bench.queries_for(domain)
            for name, run in variants.items():
                result = run(pool, queries)
                recall = recall_at_k(result.rankings, ground_truth)
                report.rows.append(RecallRow(domain, name, recall[1], recall[5], recall[10]))
                seconds[name].extend(result.seconds)
                if result.episodes and episode_k is not None:
                    k = len(result.episodes[0].post_ranking) if episode_k < 0 else episode_k
                    pre = {r.query_id: r.pre_ranking for r in result.episodes}
                    containment &= containment_holds(result.rankings, pre, ground_truth, k)
            log_event("suite.domain_completed", {"setting": setting, "domain": domain, "queries": len(queries)})

        report.latency = {
            name: (float(np.mean(values)), float(np.max(values))) for name, values in seconds.items() if values
        }
        report.metadata.update(
            {
                "pool_size": str(self.pool(setting, self.bench.domains[0]).count) if setting == "multi" else "per-domain",
                "queries": str(len(self.bench.queries)),
                "k": str(self.cfg.k),
                "epochs": str(self.cfg.epochs),
                "bench_seed": str(self.bench.config.seed),
                "global_seed": str(self.cfg.seed),
            }
        )
        if episode_k is not None:
            report.metadata["containment"] = str(containment).lower()
            if not containment:
                logger.error("Containment bound violated in %s setting", setting)
        return report


def _method_variants(suite: SuiteRunner, methods: Iterable[Method]):
    return {method: (lambda pool, queries, m=method: suite.run_method(m, pool, queries)) for method in methods}


def run_suite(
    bench: Benchmark,
    model: DualEncoder,
    cfg: EpisodeConfig,
    methods: Sequence[Method] = METHODS,
    settings: Sequence[Setting] = SETTINGS,
    threads: int = 1,
    ft_epochs: int = 4,
    ft_batch_size: int = 64,
    config_digest: str = "",
    suite: SuiteRunner | None = None,
) -> dict[str, RecallReport]:
    suite = suite or SuiteRunner(bench, model, cfg, threads, ft_epochs, ft_batch_size)
    reports = {}
    for setting in settings:
        report = suite.report(setting, _method_variants(suite, methods), cfg.k if "EFSA" in methods else None)
        if config_digest:
            report.metadata["config_digest"] = config_digest
        reports[setting] = report
        log_event(
            "suite.setting_completed",
            {"setting": setting, "methods": list(methods), "rows": len(report.rows)},
        )
    return reports


def _episodic_sweep(
    suite: SuiteRunner,
    setting: Setting,
    configs: Mapping[str, EpisodeConfig],
    full_tuning: Mapping[str, bool] | None = None,
) -> RecallReport:
    full_tuning = full_tuning or {}
    variants = {
        label: (
            lambda pool, queries, c=cfg, f=full_tuning.get(label, False): suite.episodic(pool, queries, c, f)
        )
        for label, cfg in configs.items()
    }
    # each variant may use a different k, so containment reads k from the run itself
    return suite.report(setting, variants, episode_k=-1)


def ablate_topk(
    suite: SuiteRunner,
    ks: Sequence[int] = (8, 16, 32, 64),
    setting: Setting = "multi",
) -> RecallReport:
    configs = {f"EFSA[k={k}]": suite.cfg.model_copy(update={"k": k}) for k in ks}
    report = _episodic_sweep(suite, setting, configs)
    averages = [report.average(label) for label in configs]
    r10 = [row.r10 for row in averages]
    report.metadata["r10_non_decreasing"] = str(all(a <= b for a, b in zip(r10, r10[1:]))).lower()
    if len(averages) >= 2:
        report.metadata["r1_plateau"] = str(abs(averages[-1].r1 - averages[-2].r1) <= 0.01).lower()
    return report


def ablate_epochs(
    suite: SuiteRunner,
    epochs: Sequence[int] = (1, 2, 3, 4),
    setting: Setting = "multi",
) -> RecallReport:
    configs = {f"EFSA[epochs={e}]": suite.cfg.model_copy(update={"epochs": e}) for e in epochs}
    report = _episodic_sweep(suite, setting, configs)
    averages = [report.average(label) for label in configs]
    for metric in ("r1", "r5", "r10"):
        values = [getattr(row, metric) for row in averages]
        report.metadata[f"best_epochs_{metric}"] = str(epochs[int(np.argmax(values))])
    return report


def ablate_loss(suite: SuiteRunner, setting: Setting = "multi") -> RecallReport:
    loss = suite.cfg.loss
    # a weight switched off in the run config falls back to its default so every variant trains
    alpha = loss.alpha or LossConfig.model_fields["alpha"].default
    beta = loss.beta or LossConfig.model_fields["beta"].default
    variants = {
        "EFSA[hinge]": loss.model_copy(update={"alpha": 0.0, "beta": beta}),
        "EFSA[contrastive]": loss.model_copy(update={"alpha": alpha, "beta": 0.0}),
        "EFSA[combined]": loss.model_copy(update={"alpha": alpha, "beta": beta}),
    }
    configs = {
        label: suite.cfg.model_copy(update={"loss": LossConfig(**variant.model_dump())})
        for label, variant in variants.items()
    }
    return _episodic_sweep(suite, setting, configs)


def ablate_lora_vs_full(suite: SuiteRunner, setting: Setting = "multi") -> RecallReport:
    configs = {"EFSA[lora]": suite.cfg, "EFSA[full]": suite.cfg}
    return _episodic_sweep(suite, setting, configs, full_tuning={"EFSA[full]": True})
