import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fdmeit import cli
from fdmeit.cli import DEFAULT_SEED, file_digest, load_vector_csv, main
from fdmeit.fdm import NoiseModel, acquire_frames, load_frames_csv
from fdmeit.forward import ConductivityField, SolverError, assemble_cem_system, forward_all, load_protocol
from fdmeit.inverse import build_operator, load_reconstruction_csv, reconstruct
from fdmeit.mesh import load_mesh
from fdmeit.sensitivity import aggregate_to_hex, compute_jacobian, load_jacobian


def run(tmp_path, *argv):
    return main(["--out-dir", str(tmp_path), *map(str, argv)])


@pytest.fixture(scope="module")
def bar_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bar")
    assert main(["--out-dir", str(out), "mesh", "bar"]) == 0
    assert main(["--out-dir", str(out), "forward", "--mesh", str(out / "mesh.eitmesh"),
                 "--protocol", str(out / "protocol.eitprot")]) == 0
    return out


def test_mesh_hinged_has_six_electrodes(tmp_path, capsys):
    assert run(tmp_path, "mesh", "hinged") == 0
    mesh = load_mesh(tmp_path / "mesh.eitmesh")
    assert sorted(e.id for e in mesh.electrodes) == [1, 2, 3, 4, 5, 6]
    assert "6 electrodes" in capsys.readouterr().out
    assert len(load_protocol(tmp_path / "protocol.eitprot").flat()) == 9


def test_forward_matches_library(bar_run):
    mesh = load_mesh(bar_run / "mesh.eitmesh")
    protocol = load_protocol(bar_run / "protocol.eitprot")
    sigma = ConductivityField(np.full(mesh.n_elements, 0.2))
    expected = forward_all(mesh, sigma, protocol, assemble_cem_system(mesh, sigma))
    assert np.array_equal(load_vector_csv(bar_run / "voltages.csv"), expected)
    assert (bar_run / "plot.py").exists()


def test_jacobian_matches_library(bar_run, tmp_path):
    assert run(tmp_path, "jacobian", "--mesh", bar_run / "mesh.eitmesh",
               "--protocol", bar_run / "protocol.eitprot") == 0
    mesh = load_mesh(bar_run / "mesh.eitmesh")
    protocol = load_protocol(bar_run / "protocol.eitprot")
    J = compute_jacobian(mesh, ConductivityField(np.full(mesh.n_elements, 0.2)), protocol)
    H, _ = aggregate_to_hex(J, mesh, 5.0)
    assert np.array_equal(load_jacobian(tmp_path / "jacobian.eitjac").matrix, H.matrix)
    assert (tmp_path / "sensitivity.vtk").exists()
    rows = np.loadtxt(tmp_path / "sensitivity_rows.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape == (mesh.n_elements, 1 + J.shape[0])


def test_jacobian_without_voxels_keeps_elements(bar_run, tmp_path):
    assert run(tmp_path, "jacobian", "--mesh", bar_run / "mesh.eitmesh",
               "--protocol", bar_run / "protocol.eitprot", "--voxel-size", 0) == 0
    mesh = load_mesh(bar_run / "mesh.eitmesh")
    assert load_jacobian(tmp_path / "jacobian.eitjac").shape[1] == mesh.n_elements


def test_reconstruct_zero_change_is_zero(bar_run, tmp_path):
    assert run(tmp_path, "jacobian", "--mesh", bar_run / "mesh.eitmesh",
               "--protocol", bar_run / "protocol.eitprot", "--voxel-size", 0) == 0
    v = bar_run / "voltages.csv"
    assert run(tmp_path, "reconstruct", "--jacobian", tmp_path / "jacobian.eitjac",
               "--voltages", v, "--reference", v, "--lambda", 1e-3,
               "--mesh", bar_run / "mesh.eitmesh") == 0
    ds = load_reconstruction_csv(tmp_path / "reconstruction.csv")
    assert ds.size == load_mesh(bar_run / "mesh.eitmesh").n_elements
    assert np.all(ds == 0.0)
    assert (tmp_path / "reconstruction.vtk").exists()


def test_reconstruct_matches_library(bar_run, tmp_path):
    assert run(tmp_path, "jacobian", "--mesh", bar_run / "mesh.eitmesh",
               "--protocol", bar_run / "protocol.eitprot") == 0
    dv = tmp_path / "dv.csv"
    dv.write_text("measurement,dv\n1,-0.0125\n")
    assert run(tmp_path, "reconstruct", "--jacobian", tmp_path / "jacobian.eitjac", "--dv", dv,
               "--lambda", 0.5, "--output", "r.csv") == 0
    J = load_jacobian(tmp_path / "jacobian.eitjac")
    expected = reconstruct(build_operator(J, 0.5), np.array([-0.0125])).delta_sigma
    assert np.array_equal(load_reconstruction_csv(tmp_path / "r.csv"), expected)


def test_reconstruct_needs_a_voltage_change(bar_run, tmp_path, capsys):
    assert run(tmp_path, "jacobian", "--mesh", bar_run / "mesh.eitmesh",
               "--protocol", bar_run / "protocol.eitprot") == 0
    assert run(tmp_path, "reconstruct", "--jacobian", tmp_path / "jacobian.eitjac") == 1
    assert "error[validation]:" in capsys.readouterr().err


def test_fdm_matches_library(bar_run, tmp_path, capsys):
    assert run(tmp_path, "fdm", "--protocol", bar_run / "protocol.eitprot",
               "--voltages", bar_run / "voltages.csv", "--noise-std", 1e-4, "--repeats", 20,
               "--timeseries") == 0
    protocol = load_protocol(bar_run / "protocol.eitprot")
    amps = load_vector_csv(bar_run / "voltages.csv")
    frames = acquire_frames(protocol, amps, 20, NoiseModel(std=1e-4, seed=DEFAULT_SEED),
                            rng=np.random.default_rng(DEFAULT_SEED))
    _, values = load_frames_csv(tmp_path / "frames.csv")
    assert np.array_equal(values, np.array([f.signed() for f in frames]))
    report = (tmp_path / "snr.txt").read_text()
    assert report.startswith("SNR REPORT 1") and "frames 20" in report
    assert (tmp_path / "timeseries.eitts").exists()
    assert "mean SNR" in capsys.readouterr().out


def test_missing_file_is_validation_error(tmp_path, capsys):
    assert run(tmp_path, "forward", "--mesh", tmp_path / "nope.eitmesh", "--protocol", "x") == 1
    err = capsys.readouterr().err
    assert err.startswith("error[validation]:") and err.count("\n") == 1
    assert "nope.eitmesh" in err


def test_negative_conductivity_is_validation_error(bar_run, tmp_path, capsys):
    code = run(tmp_path, "forward", "--mesh", bar_run / "mesh.eitmesh",
               "--protocol", bar_run / "protocol.eitprot", "--sigma", -1)
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error[validation]:") and err.count("\n") == 1


def test_threads_must_be_positive(tmp_path, capsys):
    assert main(["--threads", "0", "mesh", "bar"]) == 1
    assert "error[validation]:" in capsys.readouterr().err


def test_solver_failure_is_numerical_error(bar_run, tmp_path, capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise SolverError("factorization failed: matrix is singular")

    monkeypatch.setattr(cli, "forward_all", broken)
    code = run(tmp_path, "forward", "--mesh", bar_run / "mesh.eitmesh", "--protocol", bar_run / "protocol.eitprot")
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error[numerical]:") and err.count("\n") == 1


def test_manifest_records_run(bar_run):
    man = json.loads((bar_run / "manifest-forward.json").read_text())
    assert man["tool"] == "fdmeit" and man["subcommand"] == "forward"
    assert man["seed"] == DEFAULT_SEED == 0
    assert man["threads"] >= 1
    assert man["parameters"]["sigma"] == 0.2
    assert man["outputs"]["voltages.csv"] == file_digest(bar_run / "voltages.csv")
    assert man["inputs"][str(bar_run / "mesh.eitmesh")] == file_digest(bar_run / "mesh.eitmesh")
    assert man["started"] and man["finished"] >= man["started"]


def test_seed_is_recorded(bar_run, tmp_path):
    assert main(["--seed", "9", "--out-dir", str(tmp_path), "fdm", "--protocol", str(bar_run / "protocol.eitprot"),
                 "--voltages", str(bar_run / "voltages.csv"), "--repeats", "3"]) == 0
    assert json.loads((tmp_path / "manifest-fdm.json").read_text())["seed"] == 9


def snapshot(directory: Path) -> dict:
    files = {}
    for p in sorted(directory.rglob("*")):
        if not p.is_file():
            continue
        if p.name.startswith("manifest-"):
            m = json.loads(p.read_text())
            m.pop("started"), m.pop("finished")
            files[str(p.relative_to(directory))] = m
        else:
            files[str(p.relative_to(directory))] = p.read_bytes()
    return files


def test_hinged_scenario_passes_and_repeats_exactly(tmp_path, configs_dir):
    assert run(tmp_path, "scenario", configs_dir / "hinged.ini") == 0
    summary = (tmp_path / "summary.txt").read_text()
    assert "result PASS" in summary
    first = snapshot(tmp_path)
    assert run(tmp_path, "scenario", configs_dir / "hinged.ini") == 0
    assert snapshot(tmp_path) == first
    assert any(k.startswith("reconstructions/") for k in first)


def test_module_entry_point_reports_version():
    res = subprocess.run([sys.executable, "-m", "fdmeit", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("fdmeit ")
