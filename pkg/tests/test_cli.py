import json

import numpy as np
import pytest

from quosr import cli, mioracle
from quosr.expr import read_family
from quosr.querynet import read_datasets

TINY = {
    "model": {"latent_dim": 4, "hidden": 8, "depth": 1},
    "train": {"batch_size": 2, "K": 2, "iterations": 4, "seed": 1},
    "gen": {"count": 6, "seed": 2},
}


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("QUOSR_SEED", raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_defaults_command(capsys):
    assert cli.main(["defaults"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert set(d) == {"version", "model", "train", "query", "eval", "gen", "paths"}


def test_gen_deterministic(tmp_path):
    a, b, c = tmp_path / "a.txt", tmp_path / "b.txt", tmp_path / "c.txt"
    assert cli.main(["gen", "--seed", "3", "--count", "20", "--out", str(a)]) == 0
    assert cli.main(["gen", "--seed", "3", "--count", "20", "--out", str(b)]) == 0
    assert cli.main(["gen", "--seed", "4", "--count", "20", "--out", str(c)]) == 0
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    assert len(read_family(a)) == 20
    assert not (tmp_path / "a.txt.lock").exists()


def test_gen_empty_and_env_seed(tmp_path, monkeypatch):
    e = tmp_path / "e.txt"
    assert cli.main(["gen", "--count", "0", "--out", str(e)]) == 0
    assert read_family(e) == []
    monkeypatch.setenv("QUOSR_SEED", "3")
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    cli.main(["gen", "--count", "5", "--out", str(a)])
    cli.main(["gen", "--seed", "3", "--count", "5", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_gen_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["gen", "--count", "2", "--out", str(blocker / "x.txt")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_train_rejects_invalid_config(tmp_path, capsys):
    code = cli.main(["train", "--set", "train.tau=0", "--set", "train.batch_size=1",
                     "--out", str(tmp_path / "r")])
    assert code == 2
    err = capsys.readouterr().err
    assert "tau" in err and "batch_size" in err


def test_train_resume_bit_exact(tmp_path, tiny_config):
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(full)]) == 0
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(part), "--stop-after", "2"]) == 0
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(part),
                     "--resume", str(part / "checkpoint.ckpt")]) == 0
    for name in ("checkpoint.ckpt", "trace.csv", "loss.svg", "config.json"):
        assert (full / name).read_bytes() == (part / name).read_bytes(), name
    rows = (full / "trace.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss,pos_kl_1,pos_kl_2,neg_kl_1,neg_kl_2" and len(rows) == 5
    again = tmp_path / "again"
    cli.main(["train", "--config", str(tiny_config), "--out", str(again)])
    assert (again / "checkpoint.ckpt").read_bytes() == (full / "checkpoint.ckpt").read_bytes()


def test_query_and_eval_pipeline(tmp_path, tiny_config, capsys):
    run = tmp_path / "run"
    fam = tmp_path / "fam.txt"
    cli.main(["gen", "--seed", "2", "--count", "6", "--out", str(fam)])
    assert cli.main(["train", "--config", str(tiny_config), "--out", str(run), "--family", str(fam)]) == 0
    q, u = tmp_path / "q.tsv", tmp_path / "u.tsv"
    assert cli.main(["query", "--family", str(fam), "--checkpoint", str(run / "checkpoint.ckpt"),
                     "--seed", "0", "--out", str(q)]) == 0
    assert cli.main(["query", "--family", str(fam), "--method", "uniform", "--seed", "0",
                     "--out", str(u)]) == 0
    data, meta = read_datasets(q)
    assert meta["method"] == "quosr" and all(len(d) == 30 for d in data.values())
    q2 = tmp_path / "q2.tsv"
    cli.main(["query", "--family", str(fam), "--checkpoint", str(run / "checkpoint.ckpt"),
              "--seed", "0", "--out", str(q2)])
    assert q.read_bytes() == q2.read_bytes()
    out = tmp_path / "ev"
    assert cli.main(["eval", "--family", str(fam), "--datasets", str(q), str(u),
                     "--eval-seed", "0", "--out", str(out)]) == 0
    report = (out / "report.csv").read_text().splitlines()
    assert len(report) == 1 + 2 * len(data)
    curves = (out / "curves.csv").read_text().splitlines()
    assert len(curves) == 1 + 10
    r2 = [float(r.split(",")[5]) for r in report[1:]]
    assert np.mean(r2) == pytest.approx(1.0, abs=1e-6)  # closed world
    out2 = tmp_path / "ev2"
    cli.main(["eval", "--family", str(fam), "--datasets", str(q), str(u),
              "--eval-seed", "0", "--out", str(out2)])
    for name in ("report.csv", "summary.txt", "metrics.svg", "curves.csv", "curves.svg"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes(), name


def test_query_reports_bad_expressions_and_continues(tmp_path, capsys):
    out = tmp_path / "q.tsv"
    code = cli.main(["query", "--expr", "sin(x)", "--expr", "sin(", "--expr", "log(-(x*x) - 1)",
                     "--expr", "x^2", "--method", "uniform", "--K", "2", "--out", str(out)])
    assert code == 0
    err = capsys.readouterr().err
    assert "expr 1" in err and "expr 2" in err
    data, meta = read_datasets(out)
    assert sorted(data) == [0, 3] and meta["failed"] == [1, 2]
    assert all(len(d) == 9 for d in data.values())


def test_query_needs_checkpoint(tmp_path):
    assert cli.main(["query", "--expr", "x", "--out", str(tmp_path / "q")]) == 2


def test_eval_missing_seed_aborts(tmp_path, capsys):
    fam = tmp_path / "fam.txt"
    cli.main(["gen", "--count", "2", "--out", str(fam)])
    u = tmp_path / "u.tsv"
    cli.main(["query", "--family", str(fam), "--method", "uniform", "--out", str(u)])
    code = cli.main(["eval", "--family", str(fam), "--datasets", str(u), "--set", "eval.eval_seed=null",
                     "--out", str(tmp_path / "ev")])
    assert code == 2 and "held-out seed" in capsys.readouterr().err


def test_theory_bundled_and_singleton(tmp_path, capsys):
    assert cli.main(["theory", "--chain", "2", "--samples", "200", "--random", "0",
                     "--out", str(tmp_path / "t")]) == 0
    assert "huffman_upper: 1/1 hold" in capsys.readouterr().out
    single = tmp_path / "single.family"
    mioracle.write_family(single, mioracle.DiscreteFamily([[0, 1]]))
    assert cli.main(["theory", "--family", str(single), "--chain", "0"]) == 0
    text = (tmp_path / "t" / "theory.csv").read_text()
    assert text.startswith("check,instance")


def test_theory_random_sweep(capsys):
    assert cli.main(["theory", "--random", "10", "--chain", "2", "--samples", "300", "--seed", "1"]) == 0


def test_theory_rejects_oversize_and_corrupt(tmp_path, capsys):
    big = tmp_path / "big.family"
    mioracle.write_family(big, mioracle.DiscreteFamily(np.arange(20)[:, None], alphabet=20))
    assert cli.main(["theory", "--family", str(big)]) == 2
    assert "n <= 16" in capsys.readouterr().err
    bad = tmp_path / "bad.family"
    bad.write_text("# quosr-family v1\nprior 0.3 0.3\nf 0\nf 1\n")
    assert cli.main(["theory", "--family", str(bad)]) == 2
    assert "sum to 1" in capsys.readouterr().err


def test_train_ablation_small(tmp_path, tiny_config, capsys):
    code = cli.main(["train", "--config", str(tiny_config), "--set", "train.iterations=1",
                     "--ablation", "--held-out-count", "3", "--out", str(tmp_path / "ab")])
    assert code == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 9


def test_lock_conflict(tmp_path):
    target = tmp_path / "x"
    with cli.output_lock(target):
        with pytest.raises(cli.CliError, match="locked"):
            with cli.output_lock(target):
                pass
