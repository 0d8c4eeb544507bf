import json

import pytest

from polymerlab import __version__, cli


def run(tmp_path, *argv):
    return cli.main(list(argv) + ["--out", str(tmp_path)], quiet=True)


def report(tmp_path, stem):
    return json.loads((tmp_path / f"{stem}.json").read_text())


def test_version_and_schema(capsys):
    assert cli.main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert set(schema["estimate"]) >= {"mean", "stderr", "n", "seed"}
    assert schema["exit_codes"]["2"] == "configuration error"


def test_constants_report(tmp_path):
    assert run(tmp_path, "constants") == 0
    rep = report(tmp_path, "constants")
    assert rep["status"] == "PASS"
    assert rep["config"]["options"]["d"] == 3
    assert "workers" not in rep["config"]["options"]
    side = json.loads((tmp_path / "constants.timing.json").read_text())
    assert "wall_time_s" in side and "workers" in side["execution"]


def test_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nbeta = 0.3\nt = 1\nn_env = 20\nn_paths = 5\n")
    out = tmp_path / "a"
    assert run(out, "partition", "mean-one", "--config", str(cfg)) == 0
    assert report(out, "partition_mean_one")["config"]["options"]["beta"] == 0.3
    out = tmp_path / "b"
    assert run(out, "partition", "mean-one", "--config", str(cfg), "--beta", "0.1") == 0
    assert report(out, "partition_mean_one")["config"]["options"]["beta"] == 0.1
    out = tmp_path / "c"
    assert run(out, "partition", "mean-one", "--t", "1", "--n-env", "20", "--n-paths", "5") == 0
    assert report(out, "partition_mean_one")["config"]["options"]["beta"] == 0.2


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("beta = 0.2\nbogus = 1\n")
    assert run(tmp_path, "constants", "--config", str(cfg)) == 2
    assert "bad.cfg:2" in capsys.readouterr().err
    cfg.write_text("n_env = many\n")
    assert run(tmp_path, "constants", "--config", str(cfg)) == 2
    assert run(tmp_path, "constants", "--config", str(tmp_path / "missing.cfg")) == 2
    assert run(tmp_path, "nonsense") == 2
    assert run(tmp_path, "partition", "bogus-mode") == 2
    assert run(tmp_path, "partition", "mean-one", "--nu", "0.3") == 2


def test_failed_check_exits_one(tmp_path, monkeypatch):
    monkeypatch.setitem(cli.COMMANDS, "constants",
                        lambda cfg, em: ({}, [cli.check("always", False)]))
    assert run(tmp_path, "constants") == 1
    assert report(tmp_path, "constants")["status"] == "FAIL"


def test_replay_is_byte_identical(tmp_path):
    argv = ["partition", "mean-one", "--t", "1,2", "--n-env", "150", "--n-paths", "10",
            "--seed", "3", "--plot-data"]
    a, b = tmp_path / "w1", tmp_path / "w2"
    assert run(a, *argv, "--workers", "1") == 0
    assert run(b, *argv, "--workers", "2") == 0
    files = sorted(p.name for p in a.iterdir() if not p.name.endswith(".timing.json"))
    assert any(f.endswith("_plot.csv") for f in files)
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_transition_table(tmp_path):
    assert run(tmp_path, "transition", "--t", "2", "--radius", "2") == 0
    head = (tmp_path / "transition_p.csv").read_text().splitlines()[0]
    assert head.startswith("t,y1,y2,y3,p")
