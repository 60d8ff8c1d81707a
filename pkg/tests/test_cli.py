"""
Command-line tests: subcommands, exit codes and written files.
"""
import json
import logging

import pytest

from src.apps.cli import main

TWO_PI = 6.283185307179586


@pytest.fixture(autouse=True)
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def write_scenario(folder, name="rotation", **overrides):
    data = {
        "name": name,
        "kind": "flow",
        "field": "(-y, x)",
        "initial": {"q": [1.0, 0.0]},
        "horizon": TWO_PI,
        "checks": {"return_error": 1e-7},
    }
    data.update(overrides)
    data = {key: value for key, value in data.items() if value is not None}
    path = folder / f"{name}.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_list_builtins(capsys):
    assert main(["list-builtins"]) == 0
    out = capsys.readouterr().out
    assert "kepler-elliptic" in out
    assert "sundman-orbits" in out


def test_list_builtins_with_broken_entry(tmp_path, monkeypatch, capsys):
    write_scenario(tmp_path, name="good")
    (tmp_path / "zz-broken.json").write_text('{"name": "zz-broken",', encoding="utf-8")
    monkeypatch.setattr("src.apps.scenarios.BUILTIN_DIR", tmp_path)
    assert main(["list-builtins"]) == 2
    captured = capsys.readouterr()
    assert "good" in captured.out
    assert "ERROR:" in captured.err
    assert "malformed scenario" in captured.err


def test_run_passing_scenario(tmp_path, capsys):
    path = write_scenario(tmp_path)
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == 0
    assert "✅ rotation: PASS" in capsys.readouterr().out
    assert (tmp_path / "out" / "rotation" / "report.json").is_file()
    assert (tmp_path / "out" / "rotation" / "main-flow.csv").is_file()


def test_run_failing_scenario(tmp_path, capsys):
    path = write_scenario(tmp_path, horizon=3.141592653589793)
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_run_missing_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2
    assert "scenario file not found" in capsys.readouterr().err


def test_run_impossible_energy(tmp_path, capsys):
    path = write_scenario(
        tmp_path,
        name="too-low",
        kind="mechanical",
        field=None,
        metric=[["1", "0"], ["0", "1"]],
        potential="(x^2 + y^2)/2",
        energy=0.1,
        initial={"q": [1.0, 0.0], "v": [0.0, 1.0]},
        checks={"energy_drift": 1e-8},
    )
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == 2
    assert "ERROR:" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_scenario(tmp_path, capsys):
    path = write_scenario(tmp_path, checks={"nonsense": 1e-3})
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == 2
    assert "unknown check 'nonsense'" in capsys.readouterr().err


def test_emit(tmp_path, capsys):
    assert main(["emit", "kepler-time-law", "--out", str(tmp_path)]) == 0
    folder = tmp_path / "kepler-time-law"
    assert json.loads((folder / "scenario.json").read_text(encoding="utf-8"))["name"] == "kepler-time-law"
    assert (folder / "report.json").is_file()
    assert (folder / "perihelion-radial.csv").is_file()


def test_jobs_must_be_positive(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["verify-all", "--jobs", "0"])
    assert excinfo.value.code == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert "sundman 1.0.0" in capsys.readouterr().out


@pytest.mark.slow
def test_verify_all_is_deterministic(tmp_path):
    assert main(["verify-all", "--jobs", "2", "--out", str(tmp_path / "a")]) == 0
    assert main(["verify-all", "--jobs", "1", "--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "verify-all.json").read_bytes()
    assert first == (tmp_path / "b" / "verify-all.json").read_bytes()
    summary = json.loads(first)
    assert summary["passed"] is True
    assert len(summary["scenarios"]) == 11
