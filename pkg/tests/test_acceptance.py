"""Acceptance gate: one recorded pass/fail line per criterion, at the stated tolerances."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import bar_mesh
from fdmeit.cli import main
from fdmeit.fdm import (
    DEFAULT_FS,
    NoiseModel,
    acquire_frames,
    calibrate_noise_std,
    check_orthogonality,
    compute_snr,
    demodulate_frame,
    synthesize_frame,
)
from fdmeit.forward import (
    ConductivityField,
    assemble_cem_system,
    forward_all,
    hinged_protocol,
    pair_fields,
    two_electrode_protocol,
)
from fdmeit.inverse import build_operator, lambda_grid, reconstruct
from fdmeit.mesh import HingedActuatorParams, generate_hinged_actuator_mesh, refine_near_electrodes
from fdmeit.scenarios import (
    ResistorPhantom,
    load_scenario_config,
    noise_for_snr,
    phantom_frequencies,
    phantom_protocol,
    run_resistor_phantom,
    run_scenario,
)
from fdmeit.sensitivity import compute_jacobian

I = 165e-6
SIGMA = 0.2
BAR_AREA = 10e-3 * 1e-3
BAR_V = I * 0.1 / (SIGMA * BAR_AREA)


def bar_voltage(mesh):
    sigma = ConductivityField.uniform(mesh, SIGMA)
    t0 = time.perf_counter()
    v = forward_all(mesh, sigma, two_electrode_protocol(I))
    return abs(float(v[0])), time.perf_counter() - t0


def test_criterion_01_analytic_bar(criterion):
    base = bar_mesh(1.0)
    once = refine_near_electrodes(base, 2.0, 2.0)
    twice = refine_near_electrodes(once, 2.0, 2.0)
    v1, _ = bar_voltage(once)
    v2, seconds = bar_voltage(twice)
    err1, err2 = abs(v1 - BAR_V) / BAR_V, abs(v2 - BAR_V) / BAR_V
    z = 1e-3
    vz, _ = bar_voltage(refine_near_electrodes(refine_near_electrodes(bar_mesh(1.0, z=z), 2.0, 2.0), 2.0, 2.0))
    contact = (vz - v2) / (2 * I * z / BAR_AREA)
    ok = (err1 < 0.01 and err2 < 0.002 and seconds < 5.0 and twice.n_elements <= 20000
          and abs(contact - 1) < 1e-9)
    criterion(1, "analytic bar voltage", ok,
              f"{BAR_V:g} V; errors {err1:.2e}, {err2:.2e}; {twice.n_elements} elements in {seconds:.2f} s; "
              f"contact term ratio {contact:.12f}")


def test_criterion_02_reciprocity(criterion, hinged_system):
    ids = [1, 2, 3, 4, 5, 6]
    pairs = [(a, b) for a in ids for b in ids if a < b]
    X = pair_fields(hinged_system, pairs)
    dof = hinged_system.electrode_dof
    Z = np.array([[X[dof[p], k] - X[dof[q], k] for p, q in pairs] for k in range(len(pairs))])
    d = np.sqrt(np.diag(Z))
    worst = float((np.abs(Z - Z.T) / np.outer(d, d)).max())
    criterion(2, "reciprocity on the hinged mesh", worst < 1e-9,
              f"{len(pairs) ** 2} swaps, worst {worst:.2e} relative to sqrt(Z_dd Z_mm)")


def test_criterion_03_jacobian(criterion):
    mesh = generate_hinged_actuator_mesh(HingedActuatorParams(target_edge_length=8.0, hinge_edge_length=4.0,
                                                              thickness_cells=1))
    prot = hinged_protocol()
    sigma = ConductivityField.uniform(mesh, SIGMA)
    J = compute_jacobian(mesh, sigma, prot)
    base = assemble_cem_system(mesh, sigma)
    rowmax = np.abs(J.matrix).max(axis=1)
    worst = 0.0
    for k in np.random.default_rng(17).choice(mesh.n_elements, 20, replace=False):
        d = np.zeros(mesh.n_elements)
        d[k] = 1e-3 * SIGMA
        plus, minus = ConductivityField(sigma.values + d), ConductivityField(sigma.values - d)
        fd = (forward_all(mesh, plus, prot, base.with_sigma(plus)) - forward_all(mesh, minus, prot, base.with_sigma(minus))) / 2
        # entries below a millionth of the row's largest are at roundoff for both sides
        scale = np.maximum(np.abs(fd), 1e-6 * rowmax * d[k])
        worst = max(worst, float((np.abs(fd - J.matrix[:, k] * d[k]) / scale).max()))
    shunt = mesh.with_contact_impedance(0.0)
    sig = ConductivityField(np.random.default_rng(2).uniform(0.15, 0.25, mesh.n_elements))
    v = forward_all(shunt, sig, prot)
    scaling = float(np.max(np.abs(compute_jacobian(shunt, sig, prot) @ sig.values + v) / np.abs(v)))
    criterion(3, "adjoint Jacobian vs central differences", worst < 1e-2 and scaling < 1e-3 and mesh.n_elements <= 2000,
              f"{mesh.n_elements} elements; worst difference error {worst:.2e}; scaling identity {scaling:.2e}")


def test_criterion_04_tikhonov(criterion):
    rng = np.random.default_rng(123)
    worst = 0.0
    for n in (20, 100, 500):
        J = rng.normal(size=(9, n))
        dv = rng.normal(size=9)
        for rel in (1e-4, 1e-2, 1.0, 1e2):
            lam = rel * np.linalg.norm(J, 2) ** 2
            ds = reconstruct(build_operator(J, lam), dv).delta_sigma
            ref = np.linalg.solve(J.T @ J + lam * np.eye(n), J.T @ dv)
            worst = max(worst, float(np.linalg.norm(ds - ref) / np.linalg.norm(ref)))
    J = rng.normal(size=(9, 500)) * np.logspace(0, -3, 9)[:, None]
    dv = rng.normal(size=9)
    grid = lambda_grid(J)
    res = [reconstruct(build_operator(J, lam), dv) for lam in grid]
    norms = np.array([r.solution_norm for r in res])
    resid = np.array([r.residual for r in res])
    mono = bool((np.diff(norms) <= 1e-12 * norms[:-1]).all() and (np.diff(resid) >= -1e-12 * resid[1:]).all())
    criterion(4, "Tikhonov oracle and L-curve monotonicity", worst < 1e-10 and mono and len(grid) == 40,
              f"worst relative difference {worst:.2e} up to 9x500; monotone over {len(grid)} values: {mono}")


def test_criterion_05_fdm_round_trip(criterion, hinged_actuator):
    prot = hinged_actuator.protocol
    v = hinged_actuator.forward(hinged_actuator.baseline())
    ts = synthesize_frame(prot, v, DEFAULT_FS, 0.020, NoiseModel(quantize=False))
    frame = demodulate_frame(ts, prot)
    err = float(np.max(np.abs(frame.signed() - v) / np.abs(v)))
    leak = check_orthogonality([t.frequency for t in prot.injections], 0.020, DEFAULT_FS)
    setup = (sorted(t.frequency for t in prot.injections) == [2000.0, 4000.0, 6000.0]
             and all(t.amplitude == I for t in prot.injections) and prot.n_measurements == 9)
    criterion(5, "noiseless FDM round trip", setup and err < 1e-6 and leak.worst_leakage_db < -120,
              f"max amplitude error {err:.2e}; worst leakage {leak.worst_leakage_db:.1f} dB")


def test_criterion_06_snr(criterion, hinged_actuator):
    prot = hinged_actuator.protocol
    v = hinged_actuator.forward(hinged_actuator.baseline())
    noise = noise_for_snr(66.0, prot, v, seed=8)
    # the closed-form std must agree with a Monte-Carlo demodulation of the same tone
    mc = calibrate_noise_std(66.0, 1.0)
    oracle = abs(mc / noise_for_snr(66.0).relative_std - 1)
    a = compute_snr(acquire_frames(prot, v, 100, noise))
    b = compute_snr(acquire_frames(prot, v, 100, noise.scaled(2.0)))
    drop = float((a - b).mean())
    ok = oracle < 0.02 and abs(a.mean() - 66.0) <= 1.0 and abs(drop - 6.0) <= 0.3
    criterion(6, "calibrated SNR", ok,
              f"mean {a.mean():.2f} dB over 100 frames; doubling noise costs {drop:.2f} dB; "
              f"Monte-Carlo calibration within {oracle:.2%}")


def test_criterion_07_frequency_invariance(criterion):
    freqs = phantom_frequencies()
    loads = (171.0, 300.0, 476.0)
    truth = np.tile(I * np.array(loads), len(freqs))
    noise = noise_for_snr(66.0, phantom_protocol(len(loads), freqs), truth, seed=0)
    rep = run_resistor_phantom(ResistorPhantom(loads), freqs, noise=noise, repeats=100, seed=1)
    spread = rep.max_relative_spread
    ok = len(freqs) == 6 and freqs[0] == 2000.0 and freqs[-1] == 12000.0 and spread < 0.005
    criterion(7, "phantom frequency invariance", ok,
              f"{len(freqs)} tones 2-12 kHz, 100 repeats at {rep.snr_db.mean():.1f} dB; max spread {spread:.2e}")


@pytest.fixture(scope="module")
def scenario_outcomes(configs_dir, hinged_actuator, finger_actuator):
    hinged = run_scenario(load_scenario_config(configs_dir / "hinged.ini"), seed=0, model=hinged_actuator)
    finger = run_scenario(load_scenario_config(configs_dir / "finger.ini"), seed=0, model=finger_actuator)
    return {"hinged": hinged, "finger": finger}


def test_criterion_08_localization(criterion, scenario_outcomes):
    hits, isolation, ok = [], [], True
    for name, out in scenario_outcomes.items():
        for chamber, res in out.trials.results.items():
            hits.append(f"{name} {chamber} {out.trials.hits(chamber)}/{len(res)}")
            ok &= len(res) == 10 and out.trials.hits(chamber) == 10
        worst = max(out.isolation.values())
        isolation.append(f"{name} {worst:.3f}")
        ok &= worst < 0.05
    criterion(8, "single-chamber localization and isolation", ok,
              "; ".join(hits) + "; cross-chamber ratios " + ", ".join(isolation))


def test_criterion_09_timing(criterion, hinged_actuator):
    prot = hinged_actuator.protocol
    v = hinged_actuator.forward(hinged_actuator.baseline())
    ts = synthesize_frame(prot, v, DEFAULT_FS, 0.020, noise_for_snr(66.0, prot, v), np.random.default_rng(0))
    mesh = generate_hinged_actuator_mesh(HingedActuatorParams(target_edge_length=8.0, hinge_edge_length=3.0,
                                                              thickness_cells=2))
    J = compute_jacobian(mesh, ConductivityField.uniform(mesh, SIGMA), hinged_protocol())
    op = build_operator(J, 1e-3 * np.linalg.norm(J.matrix, 2) ** 2)
    dv = np.random.default_rng(1).normal(size=9) * 1e-4

    def median_time(fn, repeats=30):
        fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    with threadpool_limits(1):
        demod = median_time(lambda: demodulate_frame(ts, prot))
        apply = median_time(lambda: reconstruct(op, dv))
    ok = demod < 0.020 and apply < 0.050 and mesh.n_elements <= 5000 and prot.n_measurements == 9
    criterion(9, "real-time budgets on one core", ok,
              f"demodulation {demod * 1e3:.2f} ms; image on {mesh.n_elements} elements {apply * 1e3:.3f} ms")


def snapshot(directory: Path) -> dict:
    files = {}
    for p in sorted(directory.rglob("*")):
        if not p.is_file():
            continue
        key = str(p.relative_to(directory))
        if p.name.startswith("manifest-"):
            m = json.loads(p.read_text())
            m.pop("started"), m.pop("finished")
            files[key] = m
        else:
            files[key] = p.read_bytes()
    return files


def cli_pipeline(out: Path, configs_dir: Path) -> dict:
    o = ["--seed", "5", "--out-dir", str(out)]
    codes = [
        main(o + ["mesh", "bar", "--lengths", "40", "10", "2"]),
        main(o + ["forward", "--mesh", str(out / "mesh.eitmesh"), "--protocol", str(out / "protocol.eitprot")]),
        main(o + ["jacobian", "--mesh", str(out / "mesh.eitmesh"), "--protocol", str(out / "protocol.eitprot")]),
        main(o + ["fdm", "--protocol", str(out / "protocol.eitprot"), "--voltages", str(out / "voltages.csv"),
                  "--snr-db", "66", "--repeats", "20", "--timeseries"]),
        main(o + ["reconstruct", "--jacobian", str(out / "jacobian.eitjac"), "--voltages", str(out / "voltages.csv"),
                  "--reference", str(out / "voltages.csv"), "--cv-perturbations", "40"]),
        main(o + ["scenario", str(configs_dir / "finger.ini")]),
    ]
    assert codes == [0] * len(codes)
    return snapshot(out)


def test_criterion_10_determinism(criterion, tmp_path, configs_dir, scenario_outcomes, finger_actuator):
    first = cli_pipeline(tmp_path, configs_dir)
    second = cli_pipeline(tmp_path, configs_dir)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    config = load_scenario_config(configs_dir / "finger.ini")
    again = run_scenario(config, seed=0, model=finger_actuator)
    same_library = again.summary == scenario_outcomes["finger"].summary and np.array_equal(
        again.trace.delta_matrix(), scenario_outcomes["finger"].trace.delta_matrix())
    ok = not differing and same_library and len(first) > 10
    criterion(10, "bit-identical reruns", ok,
              f"{len(first)} files compared, {len(differing)} differ" + (f": {differing[:5]}" if differing else ""))
