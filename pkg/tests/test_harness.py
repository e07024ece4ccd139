import csv
import json

import pytest

from shieldcraft.envmodel import ENV_NAMES
from shieldcraft.geometry import AffineMap, Box
from shieldcraft.harness import RUNS_HEADER, SUMMARY_HEADER, reproduce_all, run_cli
from shieldcraft.shield import PwlShield, initial_shield, serialize


def cli(capsys, *argv):
    code = run_cli(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_verify_shipped_shield(tmp_path, capsys):
    path = tmp_path / "g0.json"
    path.write_bytes(serialize(initial_shield("road")))
    code, out, _ = cli(capsys, "verify", "--env", "road", "--shield", str(path))
    assert code == 0 and json.loads(out)["kind"] == "certificate"
    code, out, _ = cli(capsys, "verify", "--env", "acc")
    assert code == 0


def test_verify_counterexample_exit_2(tmp_path, capsys):
    path = tmp_path / "accel.json"
    path.write_bytes(serialize(PwlShield([((), AffineMap([[0.0, 0.0]], [2.0]))], Box([-2.0], [2.0]))))
    code, out, _ = cli(capsys, "verify", "--env", "road", "--shield", str(path))
    assert code == 2 and json.loads(out)["kind"] == "counterexample"


def test_usage_errors_exit_1(tmp_path, capsys):
    code, _, err = cli(capsys, "train", "--env", "nope")
    assert code == 1 and all(name in err for name in ENV_NAMES)
    assert cli(capsys, "frobnicate")[0] == 1
    assert cli(capsys, "train", "--env", "road", "--bogus", "1")[0] == 1
    assert cli(capsys, "verify", "--env", "road", "--shield", str(tmp_path / "missing.json"))[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"nonsense": 1}')
    code, _, err = cli(capsys, "train", "--env", "road", "--config", str(bad))
    assert code == 1 and "nonsense" in err


def test_grad_check_cli(capsys):
    code, out, _ = cli(capsys, "grad-check")
    assert code == 0 and json.loads(out)["max_relative_error"] < 1e-4


def test_describe_env(capsys):
    code, out, _ = cli(capsys, "describe-env", "--env", "pendulum")
    d = json.loads(out)
    assert code == 0 and d["name"] == "pendulum" and d["state_dim"] == 2


def test_train_with_config_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"syntheses": 2, "dagger_rounds": 1, "eval_episodes": 1,
                               "train": {"hidden": [8], "warmup": 50}, "project": {"t_cut": 1}}))
    out_dir = tmp_path / "run"
    code, out, _ = cli(capsys, "train", "--env", "road", "--steps", "400", "--seed", "2",
                       "--config", str(cfg), "--out", str(out_dir))
    assert code == 0 and json.loads(out)["violations"] == 0
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["config"]["seed"] == 2 and summary["config"]["syntheses"] == 2
    assert summary["config"]["train"]["hidden"] == [8]

    code, out, _ = cli(capsys, "rollout", "--env", "road", "--shield", str(out_dir / "checkpoints" / "shield_2.json"),
                       "--actor", str(out_dir / "checkpoints" / "actor_2.json"), "--episodes", "2")
    assert code == 0 and json.loads(out)["violations"] == 0


def test_baseline_cli(tmp_path, capsys):
    code, out, _ = cli(capsys, "baseline", "--env", "acc", "--kind", "ddpg-unshielded", "--steps", "200",
                       "--out", str(tmp_path / "b"))
    assert code == 0 and "violations" in json.loads(out)
    assert cli(capsys, "baseline", "--env", "acc", "--kind", "cpo")[0] == 1


def test_reproduce_small(tmp_path):
    summary, records = reproduce_all(tmp_path, seeds=1, steps=200)
    assert len(summary) == 12 and len(records) == 12
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SUMMARY_HEADER == (
        "env", "method", "runs", "final_cost_mean", "final_cost_sd", "violations", "zeta",
        "monitor_breaches", "network_seconds", "shield_seconds")
    assert len(rows) == 13
    with open(tmp_path / "runs.csv") as fh:
        assert tuple(next(csv.reader(fh))) == RUNS_HEADER
    for row in summary:
        if row["method"] != "ddpg-unshielded":
            assert row["violations"] == 0
    assert (tmp_path / "road" / "revel" / "seed0" / "metrics.csv").exists()
