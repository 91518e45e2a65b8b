import json

import pytest

from cgvrg.config import (
    OUTPUT_DIR_ENV, PRESETS, ConfigError, PipelineConfig, load_config, parse_overrides, replace,
)


def test_defaults_validate():
    cfg = load_config(env={})
    assert cfg == PipelineConfig()
    assert cfg.dims().top == cfg.node


def test_full_scale_preset_values():
    cfg = load_config(preset="full-scale", env={})
    assert cfg.gamma == 0.15 and cfg.beam == 3
    assert cfg.lr == 0.0005 and cfg.batch_size == 100 and cfg.epochs == 30
    assert (cfg.embed, cfg.bottom, cfg.top, cfg.feature_dim) == (1000, 512, 1000, 2048)
    assert cfg.node == cfg.top
    assert cfg.predicate_cap == 200


def test_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        load_config(preset="huge", env={})


@pytest.mark.parametrize("key,value", [
    ("top", "10"), ("gamma", "-0.1"), ("threshold", "1.5"), ("beam", "0"), ("block", "MT-III"),
    ("embed", "0"), ("epochs", "-1"), ("lr", "-1"), ("lr_decay_rate", "0"), ("batch_size", "0"),
])
def test_validation_names_the_field(key, value):
    with pytest.raises(ConfigError, match=f"^{key}"):
        load_config(overrides={key: value}, env={})


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        load_config(overrides={"colour": "red"}, env={})
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(tmp_path / "c.json", env={})


def test_type_errors():
    with pytest.raises(ConfigError, match="epochs"):
        load_config(overrides={"epochs": "ten"}, env={})
    with pytest.raises(ConfigError, match="beam"):
        load_config(overrides={"beam": 2.5}, env={})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json", env={})
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(tmp_path / "bad.json", env={})
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="flat object"):
        load_config(tmp_path / "list.json", env={})


def test_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"lr": 0.01, "beam": 5, "output_dir": "from_file"}))
    cfg = load_config(tmp_path / "c.json", preset="full-scale", env={})
    assert cfg.lr == 0.01 and cfg.beam == 5 and cfg.batch_size == 100
    cfg = load_config(tmp_path / "c.json", env={OUTPUT_DIR_ENV: "from_env"})
    assert cfg.output_dir == "from_env"
    cfg = load_config(tmp_path / "c.json", overrides={"output_dir": "cli", "beam": "2"},
                      env={OUTPUT_DIR_ENV: "from_env"})
    assert cfg.output_dir == "cli" and cfg.beam == 2


def test_parse_overrides():
    assert parse_overrides(["a=1", " b = x=y "]) == {"a": "1", "b": "x=y"}
    assert parse_overrides(None) == {}
    with pytest.raises(ConfigError, match="key=value"):
        parse_overrides(["novalue"])


def test_hash_is_stable_and_sensitive():
    a, b = load_config(env={}), load_config(env={})
    assert a.hash() == b.hash()
    assert replace(a, seed=1).hash() != a.hash()


def test_replace_validates():
    with pytest.raises(ConfigError, match="beam"):
        replace(PipelineConfig(), beam=0)


def test_corpus_path_defaults_into_output_dir():
    cfg = PipelineConfig(output_dir="somewhere")
    assert str(cfg.corpus) == "somewhere/corpus.jsonl"
    assert str(replace(cfg, corpus_path="x.jsonl").corpus) == "x.jsonl"


def test_presets_only_use_known_keys():
    known = set(PipelineConfig().to_json())
    for values in PRESETS.values():
        assert set(values) <= known
