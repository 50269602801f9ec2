import json

import pytest

from exclique import cli, experiment
from exclique.consensus import DelayMode, OrderMode, PcbMode
from exclique.experiment import ConfigError, ExperimentConfig


def test_presets():
    assert ExperimentConfig(algo="clique").modes == (OrderMode.FIXED, DelayMode.NAIVE, PcbMode.FULL)
    assert ExperimentConfig(algo="exclique").modes == (OrderMode.DIFFERENTIAL, DelayMode.ACCURATE, PcbMode.PCB)
    mixed = ExperimentConfig(algo="exclique", order_mode="fixed")
    assert mixed.modes[0] is OrderMode.FIXED


def test_parse_config_text():
    text = "# comment\nalgo = exclique\nn = 11\nm = auto\nnetwork.bandwidth = 1e7\nfaults.fail_steps = [3, 5]\n"
    cfg = experiment.config_from_mapping(experiment.parse_config_text(text))
    assert cfg.algo == "exclique" and cfg.n == 11 and cfg.m == "auto"
    assert cfg.network == {"bandwidth": 1e7}
    assert cfg.sim_config(m=10).faults.fail_steps == (3, 5)


@pytest.mark.parametrize(
    "text,line",
    [
        ("n = 5\nbogus = 1\n", 2),
        ("n = 5\nsteps = 10\nm = -3\n", 3),
        ("algo = nope\n", 1),
        ("n = 5\nthis line has no equals\n", 2),
        ("network.warp = 9\n", 1),
        ("n = 4.5\n", 1),
        ("seed = 1\nn.x = 3\n", 2),
        ("steps =\n", 1),
    ],
)
def test_config_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=rf"cfg:{line}:"):
        experiment.parse_config_text(text, "cfg")


def test_json_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"algo": "clique", "n": 5, "steps": 10}))
    assert experiment.load_config(p).n == 5
    p.write_text('{"n": 5,\n "steps": }')
    with pytest.raises(ConfigError, match=r"c.json:2:"):
        experiment.load_config(p)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(n=1)
    with pytest.raises(ConfigError):
        ExperimentConfig(cost={"nope": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(m="lots")


def test_sweeps():
    points = experiment.expand_sweeps(ExperimentConfig(), ["n=5,7", "network.bandwidth=1e6,2e6"])
    assert len(points) == 4
    assert points[3][1].n == 7 and points[3][1].network["bandwidth"] == 2e6
    with pytest.raises(ConfigError):
        experiment.expand_sweeps(ExperimentConfig(), ["warp=1"])


def test_probe_and_fit():
    cfg = ExperimentConfig(algo="exclique", n=7, probe={"grid": [200, 800], "trials": 1})
    res = experiment.probe_broadcast(cfg, 400)
    assert len(res.per_receiver) == 6 and res.broadcast_time > 0
    assert res.mean_size < res.full_size
    m_star, fit = experiment.estimate_m_star(cfg)
    cost = cfg.cost_model()
    assert fit(m_star) + cost.local(m_star) <= cfg.t_b < fit(m_star + 1) + cost.local(m_star + 1)


def test_run_artifacts_deterministic(tmp_path):
    cfg = ExperimentConfig(algo="exclique", n=5, m=50, steps=15, seed=2)
    a = experiment.run(cfg, tmp_path / "a")
    experiment.run(cfg, tmp_path / "b")
    for name in ("trace.ndjson", "steps.csv", "summary.json", "rewards.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.summary["rewards"]["conserved"]


def test_cli_run_and_sweep(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--nodes", "5", "--m", "40", "--steps", "10", "--out", str(out)]) == 0
    assert (out / "summary.json").exists()
    assert cli.main(["run", "--nodes", "5", "--m", "40", "--steps", "10", "--out", str(out),
                     "--sweep", "seed=1,2"]) == 0
    assert (out / "seed=1" / "trace.ndjson").exists() and (out / "seed=2" / "summary.json").exists()
    assert "tps" in capsys.readouterr().out


def test_cli_compare_and_probe(tmp_path, capsys):
    assert cli.main(["compare", "--nodes", "5", "--m", "40", "--steps", "10", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "exclique vs clique" in text
    assert json.loads((tmp_path / "compare.json").read_text())["rows"][1]["algo"] == "exclique"
    assert cli.main(["probe", "--algo", "exclique", "--nodes", "5", "--m", "100"]) == 0
    assert "broadcast_time_ms" in capsys.readouterr().out


def test_cli_config_error(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("n = 5\nwat = 1\n")
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "bad.cfg:2:" in capsys.readouterr().err
