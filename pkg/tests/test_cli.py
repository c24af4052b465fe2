import json

import pytest

from servicenet.cli import main


@pytest.fixture
def map_file(tmp_path):
    path = tmp_path / "map.json"
    assert main(["gen-map", "--K", "10", "--R", "5", "--d", "0.5", "--t-star", "10", "--seed", "2",
                 "-o", str(path)]) == 0
    return path


def test_allocate_and_tables(map_file, capsys):
    assert main(["allocate", "--map", str(map_file), "--M", "4", "--mu", "0.2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert sum(out["allocation"]) == 4 and 0 <= out["expected_covered_demand"] <= 1
    for kind in ("mcrp", "mexcrp"):
        assert main(["compliance-table", kind, "--map", str(map_file), "--M", "4", "--mu", "0.2"]) == 0
        levels = json.loads(capsys.readouterr().out)["levels"]
        assert [sum(r) for r in levels] == [1, 2, 3, 4]


@pytest.mark.parametrize("relocate", ["RP1", "RP2", "RP3", "RP4", "rp5"])
def test_simulate(map_file, tmp_path, capsys, relocate):
    trace = tmp_path / "trace.csv"
    args = ["simulate", "--map", str(map_file), "--M", "4", "--mu", "0.2", "--lam", "0.05", "--horizon", "200",
            "--dispatch", "dp4", "--relocate", relocate, "--rd-max", "10", "--trace", str(trace)]
    assert main(args) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["calls_total"] == rep["calls_on_time"] + rep["penalties"]
    assert trace.read_text().startswith("time,event_kind")


def test_sweep_and_report(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"K": 8, "R": 4, "M": [3], "d": [1.0], "t_star": [10], "mu": [0.2],
                                "maps_per_config": 2, "horizon": 150, "dispatch": ["DP1"], "relocate": ["RP1"]}))
    out = tmp_path / "out.csv"
    assert main(["sweep", "--spec", str(spec), "-o", str(out), "--paper-faithful"]) == 0
    assert out.read_text().startswith("K,R,lam,M")
    assert main(["report", "--csv", str(out)]) == 0
    assert "DP1" in capsys.readouterr().out


def test_tune_rp5(map_file, capsys):
    assert main(["tune-rp5", "--map", str(map_file), "--M", "4", "--mu", "0.2", "--horizon", "50",
                 "--runs", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["scores"]) == 64 and out["best"] in [{k: v for k, v in s.items() if k != "mean"}
                                                          for s in out["scores"]]


def test_failure_writes_error_record(tmp_path, capsys):
    assert main(["simulate", "--map", str(tmp_path / "missing.json"), "--M", "2", "--mu", "0.1"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["command"] == "simulate"


def test_usage_error_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code != 0
