import json

import pytest

from hpcalign import pipeline as pl
from hpcalign.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from hpcalign.hpcc import TrainingDivergedError
from hpcalign.logio import loads_log


def sim(tmp_path, *extra):
    out = tmp_path / "sim.jsonl"
    assert run(["simulate", "--episodes", "6", "--seed", "7", "--out", str(out), *extra]) == EXIT_OK
    return out


def test_simulate_is_byte_reproducible(tmp_path, capsys):
    assert run(["simulate", "--episodes", "4", "--seed", "7"]) == EXIT_OK
    first = capsys.readouterr().out
    assert run(["simulate", "--episodes", "4", "--seed", "7"]) == EXIT_OK
    assert capsys.readouterr().out == first
    trajs = loads_log(first)
    assert len(trajs) == 4 and {t.task_id for t in trajs} <= set(pl.prompts_for())


def test_full_pipeline(tmp_path, capsys):
    log = sim(tmp_path)
    ckpt = tmp_path / "m.npz"
    assert run(["train", "--data", str(log), "--steps", "3", "--batch-size", "4", "--out", str(ckpt),
                "--history", str(tmp_path / "h.jsonl")]) == EXIT_OK
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 3
    inf = tmp_path / "inf.jsonl"
    assert run(["infer", "--checkpoint", str(ckpt), "--episodes", "4", "--task", "fridge_milk",
                "--out", str(inf)]) == EXIT_OK
    met = tmp_path / "epr.json"
    assert run(["metrics", "epr", "--log", str(inf), "--K", "3", "--boot", "20", "--out", str(met)]) == EXIT_OK
    assert json.loads(met.read_text())["kind"] == "epr"
    capsys.readouterr()
    assert run(["report", "--metrics", str(met), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert (tmp_path / "rep" / "epr_curve.csv").exists()


def test_metrics_pac_and_plot_data(tmp_path, capsys):
    log = sim(tmp_path, "--noise-rate", "0.5")
    csv = tmp_path / "pac.csv"
    assert run(["metrics", "pac", "--log", str(log), "--K", "3", "--boot", "10", "--plot-data", str(csv)]) == EXIT_OK
    assert "pac_slope" in capsys.readouterr().out
    lines = csv.read_text().splitlines()
    assert lines[0] == "lag,value,ci_low,ci_high" and len(lines) == 4


@pytest.mark.parametrize("argv", [
    ["simulate", "--bogus"],
    ["nope"],
    ["infer", "--ablation", "--label-mode", "fuzzy"],
    ["infer", "--episodes", "1"],  # neither checkpoint nor ablation
    ["train", "--out", "x.npz"],  # --data missing
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("simulate:\n  episodez: 3\n")
    assert run(["--config", str(cfg), "simulate", "--episodes", "1"]) == EXIT_USAGE
    assert "episodez" in capsys.readouterr().err


def test_config_env_var_is_honoured(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("simulate:\n  episodes: 2\n")
    monkeypatch.setenv("HPCALIGN_CONFIG", str(cfg))
    assert run(["simulate"]) == EXIT_OK
    assert len(loads_log(capsys.readouterr().out)) == 2


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not a log\n")
    assert run(["metrics", "epr", "--log", str(bad)]) == EXIT_DATA
    assert "line 1" in capsys.readouterr().err
    assert run(["metrics", "epr", "--log", str(tmp_path / "missing.jsonl")]) == EXIT_DATA
    assert run(["simulate", "--task", "make_coffee", "--episodes", "1"]) == EXIT_DATA
    assert "make_coffee" in capsys.readouterr().err


def test_empty_log_has_no_data(tmp_path, capsys):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert run(["metrics", "epr", "--log", str(empty)]) == EXIT_DATA
    assert run(["train", "--data", str(empty), "--out", str(tmp_path / "m.npz")]) == EXIT_DATA


def test_report_on_empty_metrics_says_no_data(tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text("")
    assert run(["report", "--metrics", str(m), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert "no data" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_2(tmp_path, capsys):
    ck = tmp_path / "m.npz"
    ck.write_bytes(b"garbage")
    assert run(["infer", "--checkpoint", str(ck), "--episodes", "1"]) == EXIT_DATA


def test_divergence_exit_3(tmp_path, monkeypatch, capsys):
    log = sim(tmp_path)

    def boom(*a, **k):
        raise TrainingDivergedError("loss became nan at step 1")

    monkeypatch.setattr(pl, "train_model", boom)
    assert run(["train", "--data", str(log), "--out", str(tmp_path / "m.npz")]) == EXIT_NUMERIC
    assert "nan" in capsys.readouterr().err
