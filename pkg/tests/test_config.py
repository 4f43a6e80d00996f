import json

import pytest

from quosr import config as cfgmod
from quosr.config import ConfigError, ExperimentConfig


def test_defaults_valid_and_round_trip():
    cfg = ExperimentConfig()
    assert cfg.validate() == []
    d = json.loads(cfg.dumps())
    assert d["version"] == 1
    assert d["train"]["batch_size"] == 256 and d["train"]["lr"] == 1e-3 and d["train"]["tau"] == 0.1
    assert d["query"]["K"] == 9 and d["query"]["m"] == 3 and d["query"]["box"] == [-3.0, 3.0]
    assert d["model"]["latent_dim"] == 256
    back = cfgmod.from_dict(d)
    assert back.dumps() == cfg.dumps()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError) as ei:
        cfgmod.from_dict({"train": {"bogus": 1}, "nope": {}})
    assert "unknown key train.bogus" in ei.value.errors
    assert "unknown section 'nope'" in ei.value.errors


def test_errors_listed_exhaustively():
    with pytest.raises(ConfigError) as ei:
        cfgmod.from_dict({"train": {"tau": 0, "batch_size": 1, "lr": "fast"},
                          "model": {"strategy": "qbx"}, "gen": {"count": -1}})
    errs = ei.value.errors
    assert any("tau" in e for e in errs)
    assert any("batch_size" in e for e in errs)
    assert any("lr must be a number" in e for e in errs)
    assert any("strategy" in e for e in errs)
    assert any("gen.count" in e for e in errs)


def test_cross_section_checks():
    with pytest.raises(ConfigError) as ei:
        cfgmod.from_dict({"model": {"m": 2}})
    assert any("train.m" in e for e in ei.value.errors)


def test_type_coercion():
    cfg = cfgmod.from_dict({"train": {"iterations": 5.0}, "query": {"box": [-2, 2]},
                            "model": {"box": [-2, 2]}, "eval": {"eval_seed": None}})
    assert cfg.train.iterations == 5 and cfg.query.box == (-2, 2) and cfg.eval.eval_seed is None
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"eval": {"curve": "yes"}})
    with pytest.raises(ConfigError):
        cfgmod.from_dict({"train": {"iterations": 1.5}})


def test_version_checked():
    with pytest.raises(ConfigError, match="version"):
        cfgmod.from_dict({"version": 2})


def test_load_with_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"iterations": 7}}))
    cfg = cfgmod.load(p, ["train.lr=0.5", "paths.out_dir=somewhere"])
    assert cfg.train.iterations == 7 and cfg.train.lr == 0.5 and cfg.paths.out_dir == "somewhere"
    with pytest.raises(ConfigError):
        cfgmod.load(None, ["train.lr"])
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        cfgmod.load(p)


def test_seed_fallback(monkeypatch):
    monkeypatch.setenv("QUOSR_SEED", "42")
    cfg = cfgmod.load(None, ["gen.seed=3"])
    assert cfg.gen.seed == 3
    assert cfg.train.seed == cfg.eval.eval_seed == cfg.eval.query_seed == 42
    assert cfgmod.resolve_seed(None) == 42 and cfgmod.resolve_seed(5) == 5
    monkeypatch.setenv("QUOSR_SEED", "abc")
    with pytest.raises(ConfigError):
        cfgmod.resolve_seed(None)
    monkeypatch.delenv("QUOSR_SEED")
    assert cfgmod.resolve_seed(None, default=9) == 9
    assert cfgmod.load().train.seed == 0
