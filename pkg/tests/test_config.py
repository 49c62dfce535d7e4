from pathlib import Path

import pytest

from app.config import (
    RESOLVED_CONFIG_NAME,
    RunConfig,
    build_config,
    load_config,
    parse_config_text,
    parse_overrides,
    write_resolved_config,
)
from app.errors import ConfigError, MissingArtifactError


PROJECT_ROOT = Path(__file__).resolve().parents[1]


def test_parse_config_text_handles_comments_and_blanks():
    text = "# header\n\nk = 32  # retrieval depth\nmethods=ZS,EFSA\n"
    assert parse_config_text(text) == {"k": "32", "methods": "ZS,EFSA"}
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_config_text("k 32\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("=3\n")


def test_layering_defaults_file_overrides(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("k = 32\nepochs = 2\n", encoding="utf-8")
    cfg = load_config(path, ["epochs=3", "lr=0"])
    assert cfg.k == 32
    assert cfg.epochs == 3
    assert cfg.lr == 0.0
    assert cfg.alpha == RunConfig().alpha
    episode = cfg.episode_config()
    assert (episode.k, episode.epochs, episode.optimizer.lr) == (32, 3, 0.0)


def test_unknown_keys_and_bad_values_are_config_errors():
    with pytest.raises(ConfigError, match="nonsense"):
        build_config({"nonsense": "1"})
    with pytest.raises(ConfigError):
        build_config({"k": "one"})
    with pytest.raises(ConfigError):
        build_config({"k": "1"})
    with pytest.raises(ConfigError):
        build_config({"methods": "ZS,BM25"})
    with pytest.raises(ConfigError):
        build_config({"ablate_ks": "1,8"})
    with pytest.raises(ConfigError):
        build_config({"lora_rank": "0"})
    with pytest.raises(ConfigError):
        parse_overrides(["k"])


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_config(tmp_path / "absent.conf")


def test_resolved_config_reloads_to_the_same_run(tmp_path):
    cfg = load_config(None, ["k=24", "bench_dir=elsewhere/bench", "settings=multi"])
    path = write_resolved_config(cfg, tmp_path)
    assert path.name == RESOLVED_CONFIG_NAME
    reloaded = load_config(path)
    assert reloaded == cfg
    assert reloaded.digest() == cfg.digest()
    assert load_config(None, ["k=25"]).digest() != cfg.digest()


def test_list_fields():
    cfg = build_config({"methods": "ZS, T2T", "ablate_ks": "4,8", "ablate_epochs": "1,3"})
    assert cfg.method_list() == ("ZS", "T2T")
    assert cfg.ablate_k_list() == (4, 8)
    assert cfg.ablate_epoch_list() == (1, 3)
    assert cfg.setting_list() == ("single", "multi")


@pytest.mark.parametrize("name", ["default.conf", "smoke.conf"])
def test_shipped_configs_load(name):
    cfg = load_config(PROJECT_ROOT / "data" / name)
    assert cfg.bench_config().n_domains == cfg.n_domains
    assert cfg.encoder_dims().d_e == cfg.d_e
