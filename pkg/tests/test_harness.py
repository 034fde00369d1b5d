import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from diffnet import harness
from diffnet.algorithms import MsdTrace
from diffnet.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main
from diffnet.config import ConfigError, ExperimentConfig, rcd_subset_sizes
from diffnet.presets import PRESETS, preset
from diffnet.topology import star_graph


def small_config(**changes):
    base = {
        "name": "small",
        "topology": {"kind": "geometric", "n_nodes": 6, "radius": 0.6},
        "model": {"L": 3, "sigma_v2": 1e-3},
        "algorithms": [
            {"kind": "diffusion", "mu": 0.05},
            {"kind": "dcd", "mu": 0.05, "M": 2, "M_grad": 1},
            {"kind": "partial", "mu": 0.05, "A": "metropolis", "C": "identity", "M": 1},
        ],
        "iterations": 200,
        "runs": 6,
        "seed": 3,
        "batch_size": 2,
    }
    base.update(changes)
    return base


@pytest.fixture
def cfg_path(tmp_path):
    def write(**changes):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(small_config(**changes)))
        return str(p)
    return write


# config

@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    cfg = preset(name)
    exp = harness.Experiment.from_config(cfg)
    assert exp.topology.n_nodes == cfg.topology.n_nodes
    for spec in exp.specs:
        spec.resolve(exp.topology, exp.model.dim)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_preset_settings():
    e1 = preset("exp1")
    assert (e1.topology.n_nodes, e1.model.L, e1.runs, e1.iterations) == (10, 5, 100, 20000)
    assert [a.mu for a in e1.algorithms] == [1e-3] * 3
    e2 = preset("exp2")
    assert (e2.topology.n_nodes, e2.model.L) == (50, 50)
    e3 = preset("exp3")
    assert (e3.topology.n_nodes, e3.model.L) == (80, 40)
    exp = harness.Experiment.from_config(e3)
    ratios = {s.name: s.compression_ratio(40, exp.topology) for s in exp.specs}
    assert ratios["partial"] == ratios["dcd"] == 20
    assert ratios["cd"] == pytest.approx(80 / 65)
    assert 10 <= float(ratios["rcd"]) <= 40
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("exp4")


def test_rcd_subset_sizes():
    assert_array_equal(rcd_subset_sizes(star_graph(8), 4), [4, 1, 1, 1, 1, 1, 1, 1, 1])


def test_unknown_key_rejected():
    data = small_config()
    data["algorithms"][1]["Mgrad"] = 1
    with pytest.raises(ConfigError, match=r"algorithms\.1\..*Mgrad"):
        ExperimentConfig.from_json(json.dumps(data))


@pytest.mark.parametrize("change,msg", [
    ({"algorithms": [{"kind": "dcd", "mu": 0.1, "M": 2}]}, "dcd requires M_grad"),
    ({"algorithms": [{"kind": "cd", "mu": 0.1}]}, "cd requires M"),
    ({"algorithms": [{"kind": "diffusion", "mu": 0.1}, {"kind": "diffusion", "mu": 0.2}]}, "unique"),
    ({"seed": 2**64}, "seed"),
    ({"runs": 0}, "runs"),
    ({"topology": {"kind": "ring", "n_nodes": 3}}, "topology"),
])
def test_invalid_configs(change, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_json(json.dumps(small_config(**change)))


def test_edge_list_topology(tmp_path):
    p = tmp_path / "g.txt"
    p.write_text("0 1\n1 2\n2 3\n")
    cfg = ExperimentConfig.from_json(json.dumps(small_config(topology={"kind": "edge_list", "path": str(p)})))
    assert cfg.build_topology().edges() == [(0, 1), (1, 2), (2, 3)]


def test_updated_ignores_none():
    cfg = ExperimentConfig.from_json(json.dumps(small_config()))
    assert cfg.updated(seed=None, runs=3).runs == 3
    assert cfg.updated(seed=None).seed == 3


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv(harness.THREADS_ENV, raising=False)
    assert harness.resolve_threads() == 1
    monkeypatch.setenv(harness.THREADS_ENV, "3")
    assert harness.resolve_threads() == 3
    assert harness.resolve_threads(2) == 2
    monkeypatch.setenv(harness.THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        harness.resolve_threads()


# CSV

def test_msd_csv_format():
    text = harness.msd_csv([MsdTrace("a", np.array([1.0, 0.1]))], "sim")
    assert text == "iter,algorithm,msd,msd_db,kind\n0,a,1.0,0.0,sim\n1,a,0.1,-10.0,sim\n"


def test_theory_requires_identity_A():
    exp = harness.Experiment.from_config(ExperimentConfig.from_json(json.dumps(small_config())))
    pairs, skipped = harness.supported_specs(exp)
    assert [s.name for s, _ in pairs] == ["diffusion", "dcd"]
    assert skipped == ["partial"]


def test_deviation_report():
    sim = MsdTrace("x", np.array([1.0, 0.5, 0.1, 0.1]))
    theo = MsdTrace("x", np.array([1.0, 0.5, 0.1, 0.2]))
    (d,) = harness.deviations([sim], [theo], warmup=0)
    assert d.max_abs_db == pytest.approx(10 * np.log10(2))
    assert d.steady_gap_db == pytest.approx(-10 * np.log10(2))


# command line

def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_cli_compare_is_thread_invariant(cfg_path, tmp_path, capsys):
    p = cfg_path()
    out1, out4 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["compare", "--config", p, "--out", str(out1), "--threads", "1"]) == EXIT_OK
    assert main(["compare", "--config", p, "--out", str(out4), "--threads", "4"]) == EXIT_OK
    assert out1.read_bytes() == out4.read_bytes()
    err = capsys.readouterr().err
    assert "dcd: max |sim - theory|" in err and "partial" in err
    rows = _rows(out1)
    kinds = {(r["algorithm"], r["kind"]) for r in rows}
    assert kinds == {("diffusion", "sim"), ("dcd", "sim"), ("partial", "sim"),
                     ("diffusion", "theory"), ("dcd", "theory")}
    assert b"\r" not in out1.read_bytes()


def test_cli_env_threads(cfg_path, tmp_path, monkeypatch):
    p = cfg_path()
    monkeypatch.setenv(harness.THREADS_ENV, "3")
    a = tmp_path / "a.csv"
    assert main(["sim", "--config", p, "--out", str(a)]) == EXIT_OK
    monkeypatch.delenv(harness.THREADS_ENV)
    b = tmp_path / "b.csv"
    assert main(["sim", "--config", p, "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_cli_overrides(cfg_path, tmp_path):
    out = tmp_path / "o.csv"
    assert main(["sim", "--config", cfg_path(), "--iters", "7", "--runs", "2", "--seed", "9",
                 "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert len(rows) == 3 * 8
    assert rows[-1]["iter"] == "7"


def test_cli_bound(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bound", "--preset", "exp1", "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert len(rows) == 3 * 10
    assert all(float(r["mu_bound"]) > 0 for r in rows)


def test_cli_config_dump(capsys):
    assert main(["config", "--preset", "exp2", "--seed", "5"]) == EXIT_OK
    cfg = ExperimentConfig.from_json(capsys.readouterr().out)
    assert cfg.seed == 5 and cfg.name == "exp2"


def test_cli_config_error(cfg_path, capsys):
    p = cfg_path(algorithms=[{"kind": "dcd", "mu": 0.1, "M": 2, "M_grad": 1, "colour": 1}])
    assert main(["sim", "--config", p]) == EXIT_CONFIG
    assert "algorithms.0.colour" in capsys.readouterr().err
    assert main(["sim"]) == EXIT_CONFIG
    assert main(["sim", "--config", "/nonexistent.json"]) == EXIT_CONFIG


def test_cli_spec_error_is_config_error(cfg_path, capsys):
    p = cfg_path(algorithms=[{"kind": "dcd", "mu": 0.1, "M": 9, "M_grad": 1}])
    assert main(["sim", "--config", p]) == EXIT_CONFIG
    assert "M must be in" in capsys.readouterr().err


def test_cli_divergence(cfg_path, capsys):
    p = cfg_path(algorithms=[{"kind": "diffusion", "mu": 50.0}])
    assert main(["sim", "--config", p]) == EXIT_DIVERGED
    assert "diverged at iteration" in capsys.readouterr().err


def test_cli_eno(cfg_path, tmp_path):
    p = cfg_path(energy={"horizon_s": 400, "f": 1e-3}, runs=2)
    out = tmp_path / "eno.csv"
    assert main(["eno", "--config", p, "--out", str(out), "--node-every", "50"]) == EXIT_OK
    rows = _rows(out)
    assert list(rows[0]) == ["time_s", "algorithm", "msd", "msd_db", "kind"]
    assert len(rows) == 3 * 401
    sleep = _rows(tmp_path / "eno_sleep.csv")
    assert len(sleep) == 3 * 401
    vals = [float(r["mean_sleep_s"]) for r in sleep if r["mean_sleep_s"]]
    assert min(vals) >= 1 and max(vals) <= 300
    nodes = _rows(tmp_path / "eno_nodes_dcd.csv")
    assert list(nodes[0]) == ["time_s", "node", "asleep", "stored_energy_j", "sleep_duration_s"]
    assert len(nodes) == 8 * 6
    assert main(["eno", "--config", cfg_path()]) == EXIT_CONFIG


def test_cli_eno_requires_energy_section(cfg_path, tmp_path, capsys):
    assert main(["eno", "--config", cfg_path(), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert "energy" in capsys.readouterr().err


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "diffnet", "config", "--preset", "exp1"],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["name"] == "exp1"
