import json

import pytest

from halo.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "c"), "--layers", "256x256,128x256", "--seed", "4"]) == 0
    return d


def test_report_verb(workdir):
    out = workdir / "rep"
    assert main(["report", "--container", str(workdir / "c"), "--goal", "bal", "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"report.json", "layers.csv", "pareto.csv", "schedule.csv"}


def test_quantize_schedule_simulate_chain(workdir):
    d = workdir
    assert main(["quantize", "--container", str(d / "c"), "--goal", "perf-opt", "--out", str(d / "m")]) == 0
    assert main(["schedule", "--model", str(d / "m" / "layer0"), "--out", str(d / "s.json")]) == 0
    assert main(["simulate", "--model", str(d / "m" / "layer0"), "--schedule", str(d / "s.json"),
                 "--out", str(d / "r.json")]) == 0
    rep = json.loads((d / "r.json").read_text())
    e = rep["energy"]
    assert e["total"] == e["static"] + e["core_dynamic"] + e["buffer"] + e["memory"]


def test_config_file_and_sweep(workdir):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"sweep_points": 3, "tile_size": 64, "array": {"batch_cols": 64}}))
    out = workdir / "p.csv"
    assert main(["sweep", "--config", str(cfg), "--container", str(workdir / "c"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4


def test_characterize_sampled(workdir):
    out = workdir / "prof.json"
    assert main(["characterize", "--samples", "4", "--seed", "1", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["entries"]) == 256


def test_errors_return_nonzero(workdir, capsys):
    assert main(["report", "--container", str(workdir / "nope"), "--out", str(workdir / "x")]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["characterize", "--exhaustive", "--samples", "3", "--out", "x"])
