import json
import subprocess
import sys

import pytest

from nmscm.cli import build_parser, grid_from_args, main


def test_counterexample_command(tmp_path, capsys):
    assert main(["counterexample", "--out", str(tmp_path)]) == 0
    assert "counterexample" in capsys.readouterr().out
    assert (tmp_path / "report.md").is_file()
    assert (tmp_path / "figures" / "transport.svg").is_file()


def test_sampler_demo_command(tmp_path, capsys):
    assert main(["sampler-demo", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "32 queries" in out and "change rate 0.500" in out
    stats = json.loads((tmp_path / "sampler_stats.json").read_text())
    assert stats["queries"] == 32


def test_sampler_demo_short_budget_exit_code(tmp_path):
    with pytest.warns(UserWarning):
        code = main(["sampler-demo", "--rollouts", "2", "--candidates", "2", "--budget", "40", "--out", str(tmp_path)])
    assert code == 1


def test_sweep_command_with_overrides(tmp_path, capsys):
    code = main(["sweep", "--out", str(tmp_path), "--families", "threshold_flip", "--noises", "skewed",
                 "--n-train", "300", "--seeds", "1", "--steps", "10"])
    assert code == 0
    assert "4 records, 0 failed" in capsys.readouterr().out
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["command"] == "sweep"
    assert doc["config"]["train"]["steps"] == 10


def test_grid_file_and_override_merge(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps({"families": ["smooth_flip"], "n_train": [500], "train": {"lr": 0.01}}))
    args = build_parser().parse_args(["sweep", "--out", "x", "--config", str(path), "--seeds", "2", "--steps", "5"])
    grid = grid_from_args(args)
    assert grid.seeds == 2 and grid.train == {"lr": 0.01, "steps": 5}
    assert [c.family.tag for c in grid.configs()] == ["smooth_flip"] * 4


def test_bad_config_exits_with_2(tmp_path, capsys):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps({"colour": "red"}))
    assert main(["sweep", "--out", str(tmp_path / "o"), "--config", str(path)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["sweep", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["bridge", "--out", str(tmp_path / "b"), "--strengths", "0,0.5"]) == 2


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert out.count("PASS") >= 6


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "nmscm", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("sweep", "bridge", "counterexample", "sampler-demo", "selftest"):
        assert cmd in res.stdout
