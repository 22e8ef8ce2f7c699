import csv
import statistics

import numpy as np
import pytest

from flgfn import cli, trainer
from flgfn.config import PRESETS, ConfigError, load_config
from flgfn.objectives import Objective

FAST = ["--train.budget=400", "--train.hidden=16", "--eval.snapshot_every=100"]


def read_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def root(tmp_path, monkeypatch):
    out = tmp_path / "runs"
    monkeypatch.setenv("FLGFN_OUTPUT_ROOT", str(out))
    return out


# -- configuration ----------------------------------------------------------------


def test_defaults_follow_environment_kind():
    s = load_config(preset="set-tiny")
    b = load_config(preset="bits-tiny")
    assert (s.resolved_lr(), s.resolved_epsilon(), s.resolved_log_z_lr()) == (1e-3, 0.05, 0.1)
    assert (b.resolved_lr(), b.resolved_epsilon(), b.resolved_log_z_lr()) == (5e-3, 0.0005, 1e-3)
    assert load_config(preset="bits-tiny", overrides=["objective.kind=tb"]).resolved_lr() == 1e-4
    assert s.objective is Objective.FL_DB and s.batch_size == 16 and s.subtb_lambda == 0.9


def test_every_preset_builds():
    for name in PRESETS:
        cfg = load_config(preset=name)
        assert cfg.env.preset == name


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[env]\npreset = set-tiny\nseed = 4\n\n[train]\nbudget = 2e4\nlr = 0.01\n")
    cfg = load_config(path, ["train.lr=0.002", "objective.kind=FL-SubTB"])
    assert (cfg.env.universe_size, cfg.env.seed, cfg.budget, cfg.lr) == (6, 4, 20000, 0.002)
    assert cfg.objective is Objective.FL_SUBTB


@pytest.mark.parametrize("text, line, fragment", [
    ("[env]\nkind = set\n[train]\nbogus = 1\n", 4, "unknown key train.bogus"),
    ("[env]\nkind = set\n[nope]\nx = 1\n", 3, "unknown section [nope]"),
    ("[train]\n\nbudget = lots\n", 3, "train.budget"),
    ("[train]\npartial = maybe\n", 2, "expected a boolean"),
])
def test_config_errors_carry_line_numbers(tmp_path, text, line, fragment):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert f"bad.ini:{line}:" in str(info.value) and fragment in str(info.value)


@pytest.mark.parametrize("override", [
    "train.budget=0", "exploration.epsilon=2", "objective.subtb_lambda=0",
    "objective.backward=sideways", "env.kind=graph", "train.concurrency=gpu",
    "eval.exact=sometimes", "env.universe_size=2",
])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(preset="set-tiny", overrides=[override])


def test_unknown_preset_and_bad_override():
    with pytest.raises(ConfigError):
        load_config(preset="set-huge")
    with pytest.raises(ConfigError):
        load_config(overrides=["budget=5"])


def test_ini_snapshot_round_trips():
    cfg = load_config(preset="set-tiny", overrides=["train.seed=3", "objective.kind=subtb"])
    again = load_config(text=cfg.to_ini({"report": {"backend": "x"}}))
    assert again.to_ini() == cfg.to_ini()
    assert again.digest() == cfg.digest()
    other_seed = load_config(preset="set-tiny", overrides=["train.seed=4", "objective.kind=subtb"])
    assert other_seed.digest() == cfg.digest()


# -- CLI --------------------------------------------------------------------------


def test_run_writes_outputs_and_reruns_identically(root, capsys):
    args = ["run", "--env", "set-tiny", "--objective", "fl-db", "--seed", "1", *FAST]
    assert cli.main(args) == 0
    run = root / capsys.readouterr().out.strip().split("/")[-1]
    assert {p.name for p in run.iterdir()} >= {"config.ini", "metrics.csv", "samples.csv",
                                               "timing.csv", "model.npz"}
    rows = read_rows(run / "metrics.csv")
    assert list(rows[0]) == trainer.METRIC_COLUMNS
    assert rows[0]["loss"] == "" and rows[-1]["l1_to_target"] != ""
    assert run.name.endswith("-seed1")
    ini = (run / "config.ini").read_text()
    assert "[report]" in ini and "backend" in ini
    first = (run / "metrics.csv").read_bytes()
    samples = (run / "samples.csv").read_bytes()
    assert cli.main(args) == 0
    assert (run / "metrics.csv").read_bytes() == first
    assert (run / "samples.csv").read_bytes() == samples


def test_threads_and_sequential_metrics_identical(root, capsys):
    base = ["run", "--env", "set-tiny", *FAST]
    assert cli.main(base) == 0
    seq = root / capsys.readouterr().out.strip().split("/")[-1]
    assert cli.main(base + ["--train.concurrency=threads", "--train.workers=3"]) == 0
    par = root / capsys.readouterr().out.strip().split("/")[-1]
    assert seq != par
    assert (seq / "metrics.csv").read_bytes() == (par / "metrics.csv").read_bytes()


def test_eval_recomputes_final_metrics(root, capsys):
    assert cli.main(["run", "--env", "set-tiny", "--objective", "tb", *FAST]) == 0
    run = root / capsys.readouterr().out.strip().split("/")[-1]
    assert cli.main(["eval", str(run)]) == 0
    got = read_rows(run / "eval.csv")[0]
    final = read_rows(run / "metrics.csv")[-1]
    for key in ("top_k_avg_reward", "modes", "l1_to_target", "spearman"):
        assert float(got[key]) == pytest.approx(float(final[key]), abs=1e-12)


def test_sweep_grid_and_summary(root, tmp_path, capsys):
    path = tmp_path / "sweep.ini"
    path.write_text("[env]\npreset = set-tiny\n[sweep]\nobjectives = db, fl-db\nseeds = 0, 1, 2\n")
    assert cli.main(["sweep", str(path), *FAST]) == 0
    sweep = root / capsys.readouterr().out.strip().split("/")[-1]
    cells = sorted(p.name for p in sweep.iterdir() if p.is_dir())
    assert cells == [f"{o}-seed{s}" for o in ("db", "fl_db") for s in range(3)]
    summary = {r["objective"]: r for r in read_rows(sweep / "summary.csv")}
    for obj in ("db", "fl_db"):
        finals = [read_rows(sweep / f"{obj}-seed{s}" / "metrics.csv")[-1] for s in range(3)]
        vals = [float(f["l1_to_target"]) for f in finals]
        row = summary[obj]
        assert row["n_seeds"] == "3" and row["n_failed"] == "0"
        assert float(row["l1_to_target_mean"]) == statistics.fmean(vals)
        assert float(row["l1_to_target_std"]) == statistics.pstdev(vals)
        assert float(row["transitions_std"]) == 0.0


def test_oracle_tables(root, tmp_path):
    out = tmp_path / "oracle"
    assert cli.main(["oracle", "--env", "set-tiny", "--out", str(out)]) == 0
    target = read_rows(out / "target.csv")
    assert len(target) == 20
    assert sum(float(r["prob"]) for r in target) == pytest.approx(1.0, abs=1e-12)
    flows = {r["key"]: r for r in read_rows(out / "flows.csv")}
    z = np.exp([float(r["log_reward"]) for r in target]).sum()
    assert float(flows[""]["log_flow"]) == pytest.approx(np.log(z), abs=1e-12)
    out2 = tmp_path / "oracle-bits"
    assert cli.main(["oracle", "--env", "bits-tiny", "--env.n=8", "--out", str(out2)]) == 0
    assert len(read_rows(out2 / "target.csv")) == 256
    assert len(read_rows(out2 / "flows.csv")) == 1 + 16 + 256


def test_config_errors_exit_two(root, tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[env]\nkind = set\n[train]\nbogus = 1\n")
    assert cli.main(["run", str(path)]) == 2
    assert "bad.ini:4" in capsys.readouterr().err
    assert cli.main(["run", "--env", "set-tiny", "--objective", "tb", "--partial", "true"]) == 2
    assert cli.main(["run", "--env", "set-tiny", "stray"]) == 2


def test_oracle_beyond_cap_exits_one(root, tmp_path):
    assert cli.main(["oracle", "--env", "set-small", "--out", str(tmp_path / "o")]) == 1


def test_non_finite_loss_exit_code(root, monkeypatch, capsys):
    real = trainer.batch_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        loss = real(*args, **kwargs)
        return loss * float("nan") if calls["n"] == 2 else loss

    monkeypatch.setattr(trainer, "batch_loss", flaky)
    assert cli.main(["run", "--env", "set-tiny", *FAST]) == 3
    run = next(root.iterdir())
    assert "non-finite loss" in (run / "error.txt").read_text()
    assert len(read_rows(run / "metrics.csv")) == 1
    assert not (run / "model.npz").exists()
