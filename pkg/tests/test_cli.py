import json

import pytest

from koopman_mbpo import cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("command", ["train", "evaluate", "sysid", "ensemble-eval",
                                     "export-metrics"])
def test_help_documents_every_flag(capsys, command):
    code, out, _ = run_cli(capsys, command, "--help")
    assert code == 0
    sub = cli.build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in out
        if action.option_strings and action.help is None:
            pytest.fail(f"{action.option_strings} has no help text")


def test_unknown_subcommand_is_usage_error(capsys):
    assert run_cli(capsys, "frobnicate")[0] == 2


def test_bad_flag_is_usage_error(capsys):
    assert run_cli(capsys, "evaluate", "--bogus")[0] == 2
    assert run_cli(capsys, "evaluate")[0] == 2


def test_bad_config_is_usage_error(capsys, tmp_path):
    (tmp_path / "c.toml").write_text("mystery = 3\n")
    code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "c.toml"))
    assert code == 2
    doc = json.loads(err.strip())
    assert doc["exit"] == 2 and "mystery" in doc["error"]


def test_runtime_failure_is_one_json_line(capsys, tmp_path):
    code, _, err = run_cli(capsys, "evaluate", "--checkpoint", str(tmp_path / "none"))
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["type"] == "CheckpointError"


def test_random_controller_violates_constantly(capsys):
    code, out, _ = run_cli(capsys, "evaluate", "--baseline", "random", "--windows", "2")
    assert code == 0
    assert json.loads(out)["violations_mean"] > 50


def test_train_then_inspect(capsys, tmp_path):
    (tmp_path / "s.toml").write_text('preset = "smoke"\n')
    code, out, _ = run_cli(capsys, "train", "--config", str(tmp_path / "s.toml"), "--seed", "1",
                           "--out", str(tmp_path / "runs"))
    assert code == 0
    run_dir = tmp_path / "runs" / "main_seed1"
    cps = sorted((run_dir / "checkpoints").iterdir())
    assert [p.name for p in cps] == ["iter_001", "iter_002"]
    assert (run_dir / "eval.json").exists()

    code, out, _ = run_cli(capsys, "evaluate", "--checkpoint", str(cps[-1]), "--windows", "1",
                           "--steps", "6")
    assert code == 0 and json.loads(out)["episodes"] == 1

    code, out, _ = run_cli(capsys, "ensemble-eval", "--checkpoint", str(cps[-1]),
                           "--steps", "12")
    assert code == 0 and len(json.loads(out)["mae"]) == 2

    code, out, _ = run_cli(capsys, "sysid", "--data", str(cps[-1] / "dataset.csv"),
                           "--epochs", "3", "--out", str(tmp_path / "k.bin"))
    assert code == 0 and json.loads(out)["epochs"] == 3 and (tmp_path / "k.bin").exists()

    code, out, _ = run_cli(capsys, "export-metrics", "--run-dir", str(run_dir),
                           "--out", str(tmp_path / "m"))
    assert code == 0 and json.loads(out)["theta_rows"] == 3
    assert (tmp_path / "m" / "metrics.json").exists()
