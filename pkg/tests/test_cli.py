import pytest

from app.cli import main


def _tiny(tmp_path, report_dir: str = "reports") -> list[str]:
    settings = {
        "bench_dir": tmp_path / "bench",
        "model_dir": tmp_path / "model",
        "index_dir": tmp_path / "index",
        "report_dir": tmp_path / report_dir,
        "n_domains": 2,
        "items_per_domain": 20,
        "vocab_size": 6,
        "n_queries": 5,
        "n_distractors": 30,
        "n_train": 100,
        "d_in": 32,
        "d_hidden": 16,
        "d_e": 8,
        "train_steps": 5,
        "train_batch_size": 16,
        "k": 8,
        "lora_rank": 2,
        "ft_epochs": 1,
        "ft_batch_size": 16,
        "ablate_ks": "4,8",
        "ablate_epochs": "1,2",
    }
    args = []
    for key, value in settings.items():
        args.extend(["--set", f"{key}={value}"])
    return args


@pytest.fixture
def built(tmp_path):
    args = _tiny(tmp_path)
    for command in ("gen", "train-base", "index"):
        assert main([*args, command]) == 0
    return args


def test_bad_config_exits_with_2(tmp_path, capsys):
    assert main(["--set", "nonsense=1", "report-storage"]) == 2
    assert "error:" in capsys.readouterr().err
    conf = tmp_path / "bad.conf"
    conf.write_text("k 3\n", encoding="utf-8")
    assert main(["--config", str(conf), "report-storage"]) == 2


def test_missing_artifacts_exit_with_3(tmp_path):
    assert main(["--config", str(tmp_path / "absent.conf"), "report-storage"]) == 3
    assert main([*_tiny(tmp_path), "eval"]) == 3
    assert main([*_tiny(tmp_path), "gen"]) == 0
    # benchmark present, model absent
    assert main([*_tiny(tmp_path), "index"]) == 3


def test_report_storage(tmp_path, capsys):
    assert main(["--set", f"report_dir={tmp_path}", "report-storage"]) == 0
    out = capsys.readouterr().out
    assert "embedding_bytes_per_image=3072" in out
    assert "relative_overhead=0.01953125 (≈ 2%)" in out
    assert (tmp_path / "storage.txt").read_text(encoding="utf-8").splitlines()[-1].startswith("relative_overhead=")
    assert (tmp_path / "resolved_config.conf").exists()


def test_gen_prints_a_stable_digest(tmp_path, capsys):
    args = _tiny(tmp_path)
    assert main([*args, "gen"]) == 0
    first = capsys.readouterr().out.splitlines()[-1]
    assert main([*args, "gen"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == first
    assert first.startswith("digest: ")


def test_pipeline_writes_reports(built, tmp_path):
    assert main([*built, "eval"]) == 0
    reports = tmp_path / "reports"
    for setting in ("single", "multi"):
        lines = (reports / f"suite_{setting}.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "domain,method,r1,r5,r10"
        # two domains and the average, for each of the four methods
        assert len(lines) == 1 + 3 * 4
        assert (reports / f"suite_{setting}.records").exists()
        assert (reports / f"suite_{setting}.latency").exists()
    assert "meta.containment=true" in (reports / "suite_multi.records").read_text(encoding="utf-8")
    assert (reports / "resolved_config.conf").exists()
    assert (tmp_path / "index" / "mixed.pool").exists()
    assert (tmp_path / "index" / "dom0.pool").exists()


def test_reports_do_not_depend_on_thread_count(built, tmp_path):
    methods = ["--set", "methods=ZS,EFSA", "--set", "settings=multi"]
    assert main([*built, *methods, "--threads", "1", "eval"]) == 0
    one = (tmp_path / "reports" / "suite_multi.csv").read_bytes()
    assert main([*built, *methods, "--set", f"report_dir={tmp_path / 'threaded'}", "--threads", "2", "eval"]) == 0
    assert (tmp_path / "threaded" / "suite_multi.csv").read_bytes() == one


@pytest.mark.parametrize("name", ["topk", "epochs", "loss", "lora"])
def test_ablations(built, tmp_path, name):
    assert main([*built, "ablate", name]) == 0
    csv = (tmp_path / "reports" / f"ablate_{name}.csv").read_text(encoding="utf-8")
    assert csv.startswith("domain,method,r1,r5,r10\n")
    assert "EFSA[" in csv


def test_loss_ablation_accepts_a_config_without_hinge(built, tmp_path):
    assert main([*built, "--set", "beta=0", "ablate", "loss"]) == 0
    csv = (tmp_path / "reports" / "ablate_loss.csv").read_text(encoding="utf-8")
    assert "EFSA[hinge]" in csv


def test_invalid_weight_combination_exits_with_2(tmp_path, capsys):
    assert main([*_tiny(tmp_path), "--set", "alpha=0", "--set", "beta=0", "report-storage"]) == 2
    assert "error:" in capsys.readouterr().err


def test_unexpected_failures_exit_with_4(tmp_path, monkeypatch, capsys):
    def explode(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("app.cli.cmd_report_storage", explode)
    assert main(["--set", f"report_dir={tmp_path}", "report-storage"]) == 4
    assert "disk on fire" in capsys.readouterr().err
