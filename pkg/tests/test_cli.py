import json

import pytest

from app.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_SCENARIO_FAILURE, main

SHORT = """
name = "short"
mission = "waypoint"
duration_s = 1.0
seed = 2

[initial]
x_m = 0.8
y_m = 1.2

[target]
x_m = 1.5
y_m = 1.5
"""


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.toml"
    path.write_text(SHORT, encoding="utf-8")
    return str(path)


def test_missing_config_is_config_error(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "missing.toml"), "--quiet"]) == EXIT_CONFIG_ERROR
    assert "Config error" in capsys.readouterr().out


def test_invalid_config_is_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('mission = "orbit"\n', encoding="utf-8")
    assert main(["simulate", str(bad), "--quiet"]) == EXIT_CONFIG_ERROR


def test_simulate_writes_logs_json_and_db(short_config, tmp_path, capsys):
    out = tmp_path / "out"
    db = tmp_path / "r.db"
    js = tmp_path / "m.json"
    code = main(["simulate", short_config, "--out-dir", str(out), "--json-metrics", str(js), "--db", str(db), "--quiet"])
    assert code == EXIT_OK
    for name in ("truth", "estimate", "measurements", "phases"):
        assert (out / f"{name}.csv").exists()
    data = json.loads(js.read_text(encoding="utf-8"))
    assert data["scenario"] == "short"
    assert data["seed"] == 2
    assert "gross_rejection_rate" in data
    assert "Run saved as r_" in capsys.readouterr().out

    assert main(["reports", "--db", str(db)]) == EXIT_OK
    assert "short" in capsys.readouterr().out


def test_seed_override(short_config, tmp_path):
    js = tmp_path / "m.json"
    assert main(["simulate", short_config, "--seed", "9", "--json-metrics", str(js), "--quiet"]) == EXIT_OK
    assert json.loads(js.read_text(encoding="utf-8"))["seed"] == 9


def test_docking_without_dock_fails(short_config, tmp_path):
    cfg = tmp_path / "dock.toml"
    cfg.write_text(SHORT.replace('mission = "waypoint"', 'mission = "docking"'), encoding="utf-8")
    assert main(["simulate", str(cfg), "--quiet"]) == EXIT_SCENARIO_FAILURE


def test_montecarlo(short_config, tmp_path, capsys):
    out = tmp_path / "mc"
    db = tmp_path / "r.db"
    assert main(["montecarlo", short_config, "--runs", "2", "--out-dir", str(out), "--db", str(db), "--quiet"]) == EXIT_OK
    assert (out / "montecarlo.csv").exists()
    text = capsys.readouterr().out
    assert '"n_runs": 2' in text
    assert main(["reports", "--db", str(db)]) == EXIT_OK
    assert "runs=2" in capsys.readouterr().out


def test_reports_unknown_id(tmp_path, capsys):
    assert main(["reports", "nope", "--db", str(tmp_path / "r.db")]) == EXIT_OK
    assert "(none)" in capsys.readouterr().out


def test_p3p_roundtrip_command(capsys):
    assert main(["p3p-roundtrip", "--trials", "20", "--seed", "4", "--quiet"]) == EXIT_OK
    assert "p3p_roundtrip" in capsys.readouterr().out
