import argparse
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from app.bench import digest, generate, read_benchmark, write_benchmark
from app.config import RunConfig, load_config, write_resolved_config
from app.encoders import embed, load_dual_encoder, save_dual_encoder
from app.engine import train_base
from app.errors import ConfigError, EfsaError, MissingArtifactError
from app.evaluation import (
    MIXED_POOL,
    SuiteRunner,
    ablate_epochs,
    ablate_lora_vs_full,
    ablate_loss,
    ablate_topk,
    run_suite,
    write_report,
)
from app.observability import (
    configure_logging,
    disable_langsmith,
    enable_langsmith,
    is_langsmith_configured,
    log_event,
)
from app.pool import build_store, load_store, storage_report, store_paths


logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[1]
ABLATIONS = ("topk", "epochs", "loss", "lora")


def _pool_path(cfg: RunConfig, key: str) -> Path:
    name = "mixed" if key == MIXED_POOL else key
    return cfg.index_dir / f"{name}.pool"


def cmd_gen(cfg: RunConfig) -> int:
    bench = generate(cfg.bench_config())
    paths = write_benchmark(bench, cfg.bench_dir)
    write_resolved_config(cfg, cfg.bench_dir)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    content = digest(paths)
    print(f"digest: {content}")
    log_event("gen.completed", {"bench_dir": str(cfg.bench_dir), "digest": content})
    return 0


def cmd_train_base(cfg: RunConfig) -> int:
    bench = read_benchmark(cfg.bench_dir)
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
    vision, text = save_dual_encoder(model, cfg.model_dir)
    write_resolved_config(cfg, cfg.model_dir)
    print(f"vision: {vision}")
    print(f"text: {text}")
    return 0


def _load_model(cfg: RunConfig):
    return load_dual_encoder(cfg.model_dir, cfg.nonlinearity)


def cmd_index(cfg: RunConfig) -> int:
    bench = read_benchmark(cfg.bench_dir)
    model = _load_model(cfg)
    features = bench.features
    records = bench.records
    embeddings = embed(model.vision, features)

    targets = {MIXED_POOL: list(range(len(records)))}
    for domain in bench.domains:
        targets[domain] = bench.domain_rows(domain).tolist()
    for key, rows in targets.items():
        store = build_store(
            embeddings[rows], [records[i] for i in rows], _pool_path(cfg, key), features=features[rows]
        )
        print(f"{key}: {store_paths(_pool_path(cfg, key))[0]} ({store.count} items)")
    write_resolved_config(cfg, cfg.index_dir)
    return 0


def _suite(cfg: RunConfig) -> SuiteRunner:
    bench = read_benchmark(cfg.bench_dir)
    model = _load_model(cfg)
    pools = {}
    for key in [MIXED_POOL, *bench.domains]:
        path = _pool_path(cfg, key)
        if not path.exists():
            raise MissingArtifactError("pool index", path)
        pools[key] = load_store(path)
    return SuiteRunner(
        bench,
        model,
        cfg.episode_config(),
        threads=cfg.threads,
        ft_epochs=cfg.ft_epochs,
        ft_batch_size=cfg.ft_batch_size,
        pools=pools,
    )


def cmd_eval(cfg: RunConfig) -> int:
    suite = _suite(cfg)
    reports = run_suite(
        suite.bench,
        suite.model,
        suite.cfg,
        methods=cfg.method_list(),
        settings=cfg.setting_list(),
        config_digest=cfg.digest(),
        suite=suite,
    )
    write_resolved_config(cfg, cfg.report_dir)
    for setting, report in reports.items():
        csv_path, _ = write_report(report, cfg.report_dir, f"suite_{setting}")
        print(f"{setting}: {csv_path}")
        sys.stdout.write(report.to_csv())
    return 0


def cmd_ablate(cfg: RunConfig, name: str) -> int:
    suite = _suite(cfg)
    setting = cfg.ablate_setting
    if name == "topk":
        report = ablate_topk(suite, cfg.ablate_k_list(), setting)
    elif name == "epochs":
        report = ablate_epochs(suite, cfg.ablate_epoch_list(), setting)
    elif name == "loss":
        report = ablate_loss(suite, setting)
    else:
        report = ablate_lora_vs_full(suite, setting)
    report.metadata["config_digest"] = cfg.digest()
    write_resolved_config(cfg, cfg.report_dir)
    csv_path, _ = write_report(report, cfg.report_dir, f"ablate_{name}")
    print(f"{name}: {csv_path}")
    sys.stdout.write(report.to_csv())
    return 0


def cmd_report_storage(cfg: RunConfig) -> int:
    report = storage_report(
        cfg.storage_pool_size,
        cfg.storage_d_e,
        cfg.storage_bytes_per_scalar,
        cfg.storage_caption_tokens,
        cfg.storage_bytes_per_token,
    )
    lines = report.lines()
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    (cfg.report_dir / "storage.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved_config(cfg, cfg.report_dir)
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efsa",
        description="Episodic few-shot adaptation for retrieval: benchmark, training, indexing and evaluation.",
    )
    parser.add_argument("--config", type=Path, default=None, help="key=value config file.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key; repeatable, wins over the config file.",
    )
    parser.add_argument("--threads", type=int, default=None, help="Cap on parallel episodes.")
    parser.add_argument("--log-level", default="INFO", help="Logging level.")
    parser.add_argument("--trace", action="store_true", help="Enable LangSmith tracing for this run.")
    parser.add_argument("--langsmith-project", default="efsa-retrieval", help="LangSmith project name.")
    parser.add_argument("--langsmith-endpoint", default="", help="Optional LangSmith endpoint override.")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", help="Generate the synthetic benchmark.")
    commands.add_parser("train-base", help="Pre-train the base dual encoder.")
    commands.add_parser("index", help="Embed and store the retrieval pools.")
    commands.add_parser("eval", help="Run the Recall@k suite.")
    ablate = commands.add_parser("ablate", help="Run one ablation sweep.")
    ablate.add_argument("name", choices=ABLATIONS)
    commands.add_parser("report-storage", help="Print the caption storage overhead.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level.upper())

    load_dotenv(dotenv_path=PROJECT_ROOT / ".env")
    if args.trace:
        if not is_langsmith_configured():
            logger.warning("--trace given but LANGSMITH_API_KEY is not set; traces will not be uploaded")
        enable_langsmith(
            project=os.getenv("LANGSMITH_PROJECT", args.langsmith_project),
            endpoint=args.langsmith_endpoint or None,
        )
    else:
        disable_langsmith()

    try:
        overrides = list(args.overrides)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        cfg = load_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train-base":
            return cmd_train_base(cfg)
        if args.command == "index":
            return cmd_index(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.name)
        return cmd_report_storage(cfg)
    except EfsaError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("%s failed: invalid configuration: %s", args.command, exc)
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except Exception as exc:
        logger.exception("%s failed unexpectedly", args.command)
        print(f"error: {exc}", file=sys.stderr)
        return EfsaError.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
