import json
import subprocess
import sys

import numpy as np
import pytest

from urban_structure import cli
from urban_structure.data_io import load_csv, load_matrix
from urban_structure.errors import NumericalError
from urban_structure.inference import Chain


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Synthetic tables plus a config that reproduces their scaling."""
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(root), "--seed", "7", "--M", "3", "--N", "12",
                     "--alpha", "1.2", "--beta", "0.3", "--gamma", "100"]) == 0
    truth = json.loads((root / "truth.json").read_text())
    config = {
        "hyper": {"gamma": 100.0, "delta": truth["hyper"]["delta"], "lam": 0.1},
        "cost_total": truth["cost_total"],
        "chain": {"n_burn": 100, "adapt_every": 25},
        "tempering": {"n_levels": 3, "n_burn": 50},
    }
    (root / "config.json").write_text(json.dumps(config))
    return root


def run(dataset, out, *extra):
    return cli.main(["--config", str(dataset / "config.json"), "--threads", "1", *extra[:1],
                     "--out", str(out), "--origins", str(dataset / "origins.csv"),
                     "--dests", str(dataset / "dests.csv"), *extra[1:]])


def test_gen_writes_tables_and_manifest(dataset):
    assert len(load_csv(dataset / "origins.csv")) == 12
    assert len(load_csv(dataset / "dests.csv")) == 3
    manifest = json.loads((dataset / "manifest-gen.json").read_text())
    assert manifest["command"] == "gen"
    assert manifest["seed"] == 7
    assert manifest["outputs"] == ["dests.csv", "origins.csv", "truth.json"]
    assert manifest["config"]["hyper"]["gamma"] == 100.0
    assert "wall_clock_s" in manifest and "version" in manifest


def test_gen_is_byte_identical(dataset, tmp_path):
    cli.main(["gen", "--out", str(tmp_path), "--seed", "7", "--M", "3", "--N", "12",
              "--alpha", "1.2", "--beta", "0.3", "--gamma", "100"])
    for name in ("origins.csv", "dests.csv", "truth.json"):
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()


def test_infer_saddle_is_reproducible(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(dataset, out, "infer", "--method", "saddle", "--iters", "60", "--seed", "3") == 0
    assert (a / "chain.csv").read_bytes() == (b / "chain.csv").read_bytes()
    chain = Chain.from_csv((a / "chain.csv").read_text())
    assert chain.theta.shape == (60, 2)
    manifest = json.loads((a / "manifest-infer.json").read_text())
    assert manifest["config"]["chain"]["n_iters"] == 60
    assert manifest["outputs"] == ["chain.csv"]
    assert len(manifest["dataset_sha256"]) == 64


def test_infer_pm_and_summarize(dataset, tmp_path):
    assert run(dataset, tmp_path, "infer", "--method", "pm", "--iters", "20", "--seed", "1",
               "--particles", "4", "--temps", "10") == 0
    header = json.loads((tmp_path / "chain.csv").read_text().splitlines()[0])
    assert header["config"]["ais"] == {"n_particles": 4, "n_temperatures": 10}
    assert "roulette" in header
    assert cli.main(["summarize", "--out", str(tmp_path), "--chain", str(tmp_path / "chain.csv")]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert {"mean", "sd"} <= set(summary)
    kde = np.loadtxt(tmp_path / "kde_alpha.csv", delimiter=",", skiprows=1)
    assert kde.shape[1] == 2


def test_grid_and_rsq_emit_matrices(dataset, tmp_path):
    assert run(dataset, tmp_path, "grid", "--grid-n", "4") == 0
    assert load_matrix(tmp_path / "log_posterior.csv").shape == (4, 4)
    np.testing.assert_allclose(load_matrix(tmp_path / "alpha.csv").ravel(), [0.5, 1.0, 1.5, 2.0])
    assert run(dataset, tmp_path, "rsq", "--grid-n", "3") == 0
    rsq = load_matrix(tmp_path / "rsq.csv")
    assert rsq.shape == (3, 3)
    assert np.all(rsq[np.isfinite(rsq)] <= 1)
    # Both commands wrote alpha.csv; each manifest lists its own outputs.
    assert "rsq.csv" not in json.loads((tmp_path / "manifest-grid.json").read_text())["outputs"]


def test_simulate_equilibrium_and_prior_sample(dataset, tmp_path):
    assert run(dataset, tmp_path, "simulate", "--alpha", "1.2", "--beta", "0.3", "--steps", "50") == 0
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,x_3"
    assert run(dataset, tmp_path, "simulate", "--alpha", "1.2", "--beta", "0.3", "--steps", "50",
               "--sde", "--seed", "2") == 0
    assert run(dataset, tmp_path, "equilibrium", "--alpha", "1.2", "--beta", "0.3") == 0
    eq = (tmp_path / "equilibrium.csv").read_text().splitlines()
    assert eq[0] == "id,size" and len(eq) == 4
    assert run(dataset, tmp_path, "prior-sample", "--alpha", "1.2", "--beta", "0.3",
               "--samples", "30", "--seed", "4") == 0
    assert len((tmp_path / "samples.csv").read_text().splitlines()) == 31


def test_env_var_selects_config(dataset, tmp_path, monkeypatch):
    cfg = json.loads((dataset / "config.json").read_text())
    cfg["hyper"]["gamma"] = 250.0
    path = tmp_path / "env.json"
    path.write_text(json.dumps(cfg))
    monkeypatch.setenv(cli.CONFIG_ENV, str(path))
    assert cli.main(["grid", "--out", str(tmp_path), "--origins", str(dataset / "origins.csv"),
                     "--dests", str(dataset / "dests.csv"), "--grid-n", "2"]) == 0
    manifest = json.loads((tmp_path / "manifest-grid.json").read_text())
    assert manifest["config"]["hyper"]["gamma"] == 250.0


def test_missing_seed_is_bad_input(dataset, tmp_path, capsys):
    assert run(dataset, tmp_path, "simulate", "--alpha", "1", "--beta", "0.3", "--sde") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: bad_input:")


def test_malformed_csv_exit_code(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,lon,lat,quantity\na,0,0,-1\n")
    code = cli.main(["grid", "--out", str(tmp_path), "--origins", str(bad),
                     "--dests", str(dataset / "dests.csv")])
    assert code == 2
    assert capsys.readouterr().err.strip() == \
        "error: parse_error: line 2: quantity must be positive, got -1"


def test_unknown_config_key_is_bad_input(dataset, tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"chain": {"bogus": 1}}))
    code = cli.main(["--config", str(path), "infer", "--out", str(tmp_path), "--seed", "1",
                     "--origins", str(dataset / "origins.csv"), "--dests", str(dataset / "dests.csv")])
    assert code == 2


def test_nonconvergence_exit_code(dataset, tmp_path):
    cfg = json.loads((dataset / "config.json").read_text())
    cfg["integrator"] = {"max_steps": 2}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    code = cli.main(["--config", str(path), "equilibrium", "--out", str(tmp_path), "--alpha", "1.2",
                     "--beta", "0.3", "--origins", str(dataset / "origins.csv"),
                     "--dests", str(dataset / "dests.csv")])
    assert code == 4


def test_numerical_failure_exit_code(dataset, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise NumericalError("Hessian not positive definite")

    monkeypatch.setitem(cli.COMMANDS, "grid", boom)
    assert run(dataset, tmp_path, "grid") == 3
    assert capsys.readouterr().err.startswith("error: numerical_failure:")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "urban_structure.cli", "grid", "--out", str(tmp_path),
                           "--origins", str(tmp_path / "none.csv"), "--dests", str(tmp_path / "none.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("error: bad_input:")
