"""Command-line pipeline: ``fdmeit <subcommand>`` with file-based inputs and outputs.

Every run writes ``manifest-<subcommand>.json`` next to its outputs.  Exit
codes: 0 success, 1 invalid input, 2 numerical failure; failures print a
single line ``error[validation]: ...`` or ``error[numerical]: ...`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .fdm import (
    DEFAULT_FS,
    DEFAULT_WINDOW,
    NoiseModel,
    acquire_frames,
    compute_snr,
    save_frames_csv,
    save_timeseries,
    synthesize_frame,
)
from .forward import (
    ConductivityField,
    Protocol,
    SolverError,
    assemble_cem_system,
    forward_all,
    hinged_protocol,
    load_protocol,
    save_protocol,
    two_electrode_protocol,
)
from .inverse import (
    GaussianNoise,
    build_operator,
    random_perturbations,
    reconstruct,
    save_reconstruction_csv,
    save_vtk,
    select_lambda_cv,
)
from .mesh import (
    BOTTOM,
    TOP,
    ElectrodeSpec,
    FingerChamberParams,
    HingedActuatorParams,
    MeshError,
    generate_box_mesh,
    generate_finger_chamber_mesh,
    generate_hinged_actuator_mesh,
    load_mesh,
    refine_near_electrodes,
    refine_uniform,
    save_mesh,
)
from .scenarios import load_scenario_config, noise_for_snr, run_scenario, write_scenario_outputs
from .sensitivity import aggregate_to_hex, compute_jacobian, load_jacobian, save_jacobian

DEFAULT_SEED = 0
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2

logger = logging.getLogger("fdmeit")


class ValidationError(ValueError):
    pass


@dataclass
class RunManifest:
    tool: str
    version: str
    subcommand: str
    seed: int
    threads: int
    parameters: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# -- small file helpers ------------------------------------------------------------


def save_voltages_csv(protocol: Protocol, voltages: np.ndarray, path) -> None:
    rows = ["measurement,source,sink,frequency,pos,neg,voltage"]
    for m, (i, (p, n)) in enumerate(protocol.flat()):
        t = protocol.injections[i]
        rows.append(f"{m + 1},{t.source},{t.sink},{t.frequency!r},{p},{n},{float(voltages[m])!r}")
    Path(path).write_text("\n".join(rows) + "\n")


def load_vector_csv(path) -> np.ndarray:
    """Last column of a CSV with one header line."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: file not found")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return data[:, -1]


def _sigma(args, n_elements: int) -> ConductivityField:
    if args.sigma_file:
        values = load_vector_csv(args.sigma_file)
        if values.size != n_elements:
            raise ValidationError(f"{args.sigma_file}: {values.size} values for {n_elements} elements")
        return ConductivityField(values)
    return ConductivityField(np.full(n_elements, args.sigma))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} {p} not found")
    return p


PLOT_SCRIPT = '''"""Plot helper for fdmeit outputs: python plot.py <csv> [column ...]."""
import sys

import matplotlib.pyplot as plt
import numpy as np

path = sys.argv[1]
with open(path) as fh:
    header = fh.readline().strip().split(",")
data = np.genfromtxt(path, delimiter=",", skip_header=1)
data = np.atleast_2d(data)
cols = sys.argv[2:] or header[1:]
for c in cols:
    k = header.index(c)
    plt.plot(data[:, k], label=c)
plt.xlabel("row")
plt.legend()
plt.tight_layout()
plt.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
'''


def _plot_helper(out: Path) -> Path:
    p = out / "plot.py"
    p.write_text(PLOT_SCRIPT)
    return p


# -- subcommands ---------------------------------------------------------------------


def cmd_mesh(args, out: Path) -> tuple[list[Path], list[Path]]:
    if args.kind == "hinged":
        mesh = generate_hinged_actuator_mesh(HingedActuatorParams(
            electrode_inset=args.electrode_inset, contact_impedance=args.contact_impedance))
        protocol = hinged_protocol()
    elif args.kind == "finger":
        mesh = generate_finger_chamber_mesh(FingerChamberParams(contact_impedance=args.contact_impedance))
        protocol = two_electrode_protocol()
    else:
        L = args.lengths
        specs = [
            ElectrodeSpec(1, axis=0, side=BOTTOM, z=args.contact_impedance),
            ElectrodeSpec(2, axis=0, side=TOP, z=args.contact_impedance),
        ]
        mesh = generate_box_mesh(L, args.edge, specs)
        protocol = two_electrode_protocol()
    if args.refine_uniform > 1:
        mesh = refine_uniform(mesh, args.refine_uniform)
    factor = args.refine_factor if args.refine_factor is not None else (2.0 if args.kind == "hinged" else 1.0)
    if factor > 1:
        mesh = refine_near_electrodes(mesh, args.refine_radius, factor)
    mesh_path = out / args.output
    save_mesh(mesh, mesh_path)
    prot_path = out / "protocol.eitprot"
    save_protocol(protocol, prot_path)
    print(f"mesh {args.kind}: {mesh.n_nodes} nodes, {mesh.n_elements} elements, {len(mesh.electrodes)} electrodes")
    return [], [mesh_path, prot_path]


def cmd_forward(args, out: Path):
    mesh = load_mesh(_require(args.mesh, "mesh"))
    protocol = load_protocol(_require(args.protocol, "protocol"))
    protocol.check_against(mesh)
    sigma = _sigma(args, mesh.n_elements)
    v = forward_all(mesh, sigma, protocol, assemble_cem_system(mesh, sigma))
    path = out / args.output
    save_voltages_csv(protocol, v, path)
    inputs = [Path(args.mesh), Path(args.protocol)] + ([Path(args.sigma_file)] if args.sigma_file else [])
    return inputs, [path, _plot_helper(out)]


def cmd_jacobian(args, out: Path):
    mesh = load_mesh(_require(args.mesh, "mesh"))
    protocol = load_protocol(_require(args.protocol, "protocol"))
    sigma = _sigma(args, mesh.n_elements)
    J = compute_jacobian(mesh, sigma, protocol)
    outputs = []
    rows_path = out / "sensitivity_rows.csv"
    dens = J.matrix / mesh.volumes
    header = "element_id," + ",".join(f"m{m + 1}" for m in range(J.shape[0]))
    lines = [header] + [f"{k}," + ",".join(repr(float(x)) for x in dens[:, k]) for k in range(mesh.n_elements)]
    rows_path.write_text("\n".join(lines) + "\n")
    outputs.append(rows_path)
    vtk_path = out / "sensitivity.vtk"
    save_vtk(mesh, {f"m{m + 1}": dens[m] for m in range(J.shape[0])}, vtk_path)
    outputs.append(vtk_path)
    if args.voxel_size:
        J, _ = aggregate_to_hex(J, mesh, args.voxel_size)
    path = out / args.output
    save_jacobian(J, path)
    outputs.insert(0, path)
    print(f"jacobian {J.shape[0]} x {J.shape[1]}")
    return [Path(args.mesh), Path(args.protocol)], outputs


def cmd_reconstruct(args, out: Path):
    J = load_jacobian(_require(args.jacobian, "jacobian"))
    inputs = [Path(args.jacobian)]
    if args.dv:
        dv = load_vector_csv(args.dv)
        inputs.append(Path(args.dv))
    else:
        if not (args.voltages and args.reference):
            raise ValidationError("give --dv, or both --voltages and --reference")
        dv = load_vector_csv(args.voltages) - load_vector_csv(args.reference)
        inputs += [Path(args.voltages), Path(args.reference)]
    if dv.size != J.shape[0]:
        raise ValidationError(f"voltage change has {dv.size} entries, Jacobian has {J.shape[0]} rows")
    mesh = load_mesh(_require(args.mesh, "mesh")) if args.mesh else None
    if mesh is not None:
        inputs.append(Path(args.mesh))
    if args.lam is not None:
        lam = args.lam
    else:
        if args.noise_std is not None:
            std = args.noise_std
        elif args.reference:
            std = np.abs(load_vector_csv(args.reference)) * 10 ** (-args.snr_db / 20)
        else:
            raise ValidationError("cross-validation needs --noise-std or --reference voltages for --snr-db")
        groups = None
        if mesh is not None and mesh.region_tags is not None and J.shape[1] == mesh.n_elements:
            groups = mesh.region_tags
        rng = np.random.default_rng([args.seed, 7])
        X = random_perturbations(J.shape[1], args.cv_perturbations, rng, groups, args.cv_amplitude)
        report = select_lambda_cv(J, GaussianNoise(std, args.seed), training_perturbations=X)
        lam = report.lam
        print(f"lambda (cv) {lam!r}")
    res = reconstruct(build_operator(J, lam), dv)
    path = out / args.output
    save_reconstruction_csv(res, path)
    outputs = [path]
    if mesh is not None and J.shape[1] == mesh.n_elements:
        vtk = out / (Path(args.output).stem + ".vtk")
        save_vtk(mesh, {"delta_sigma": res.delta_sigma}, vtk)
        outputs.append(vtk)
    print(f"residual {res.residual:.6g} norm {res.solution_norm:.6g}")
    return inputs, outputs


def cmd_fdm(args, out: Path):
    protocol = load_protocol(_require(args.protocol, "protocol"))
    amps = load_vector_csv(args.voltages)
    if amps.size != protocol.n_measurements:
        raise ValidationError(f"{args.voltages}: {amps.size} values for {protocol.n_measurements} measurements")
    if args.noise_std is not None:
        noise = NoiseModel(std=args.noise_std, quantize=not args.no_quantize, seed=args.seed)
    elif args.snr_db is not None:
        rel = noise_for_snr(args.snr_db, protocol, amps, args.window, args.fs).relative_std
        noise = NoiseModel(relative_std=rel, quantize=not args.no_quantize, seed=args.seed)
    else:
        noise = NoiseModel(quantize=not args.no_quantize, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    outputs = []
    if args.timeseries:
        ts = synthesize_frame(protocol, amps, args.fs, args.window, noise, np.random.default_rng([args.seed, 1]))
        p = out / "timeseries.eitts"
        save_timeseries(ts, p)
        outputs.append(p)
    frames = acquire_frames(protocol, amps, args.repeats, noise, args.fs, args.window, rng)
    p = out / args.output
    save_frames_csv(frames, p, signed=True)
    outputs.append(p)
    if args.repeats >= 10:
        snr = compute_snr(frames)
        rep = out / "snr.txt"
        lines = ["SNR REPORT 1", f"frames {len(frames)}", f"window {args.window!r}"]
        lines += [f"m{m + 1} {s:.3f}" for m, s in enumerate(snr)]
        lines.append(f"mean {float(np.mean(snr)):.3f}")
        rep.write_text("\n".join(lines) + "\n")
        outputs.append(rep)
        print(f"mean SNR {float(np.mean(snr)):.2f} dB over {len(frames)} frames")
    outputs.append(_plot_helper(out))
    return [Path(args.protocol), Path(args.voltages)], outputs


def cmd_scenario(args, out: Path):
    cfg_path = _require(args.config, "config")
    config = load_scenario_config(cfg_path)
    if config.output is not None and args.out_dir is None:
        out = config.output
        out.mkdir(parents=True, exist_ok=True)
    outcome = run_scenario(config, seed=args.seed)
    written = write_scenario_outputs(outcome, out)
    written.append(_plot_helper(out))
    print(outcome.summary.splitlines()[-1])
    inputs = [cfg_path] + [p for p in (config.mesh, config.protocol) if p is not None]
    return inputs, written, out


COMMANDS = {
    "mesh": cmd_mesh,
    "forward": cmd_forward,
    "jacobian": cmd_jacobian,
    "reconstruct": cmd_reconstruct,
    "fdm": cmd_fdm,
    "scenario": cmd_scenario,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdmeit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fdmeit {__version__}")
    ap.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="BLAS threads (default: all cores)")
    ap.add_argument("--out-dir", type=Path, default=None, help="output directory (default: current)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def sigma_args(p):
        p.add_argument("--sigma", type=float, default=0.2, help="uniform conductivity, S/m")
        p.add_argument("--sigma-file", help="per-element conductivity CSV (last column)")

    p = sub.add_parser("mesh", help="generate a mesh and matching default protocol")
    p.add_argument("kind", choices=["hinged", "finger", "bar"])
    p.add_argument("--lengths", type=float, nargs=3, default=[100.0, 10.0, 1.0], help="bar dimensions, mm")
    p.add_argument("--edge", type=float, default=1.0, help="bar target edge length, mm")
    p.add_argument("--electrode-inset", type=float, default=HingedActuatorParams.electrode_inset)
    p.add_argument("--contact-impedance", type=float, default=1e-3, help="ohm m^2")
    p.add_argument("--refine-radius", type=float, default=6.0)
    p.add_argument("--refine-factor", type=float, default=None, help="near-electrode refinement (default 2 for hinged, else 1)")
    p.add_argument("--refine-uniform", type=float, default=1.0)
    p.add_argument("--output", default="mesh.eitmesh")

    p = sub.add_parser("forward", help="protocol voltages for a conductivity")
    p.add_argument("--mesh", required=True)
    p.add_argument("--protocol", required=True)
    sigma_args(p)
    p.add_argument("--output", default="voltages.csv")

    p = sub.add_parser("jacobian", help="sensitivity matrix and per-row maps")
    p.add_argument("--mesh", required=True)
    p.add_argument("--protocol", required=True)
    sigma_args(p)
    p.add_argument("--voxel-size", type=float, default=5.0, help="hex voxel size in mm; 0 keeps element columns")
    p.add_argument("--output", default="jacobian.eitjac")

    p = sub.add_parser("reconstruct", help="Tikhonov difference image")
    p.add_argument("--jacobian", required=True)
    p.add_argument("--dv", help="voltage change CSV (last column)")
    p.add_argument("--voltages", help="measured voltages CSV, used with --reference")
    p.add_argument("--reference", help="baseline voltages CSV")
    p.add_argument("--mesh", help="mesh for the VTK export and region-wise CV")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed lambda (default: cross-validate)")
    p.add_argument("--noise-std", type=float, default=None, help="CV noise std, V")
    p.add_argument("--snr-db", type=float, default=66.0, help="CV noise relative to --reference")
    p.add_argument("--cv-perturbations", type=int, default=100)
    p.add_argument("--cv-amplitude", type=float, default=0.01, help="CV perturbation scale, S/m")
    p.add_argument("--output", default="reconstruction.csv")

    p = sub.add_parser("fdm", help="synthesise and demodulate FDM frames")
    p.add_argument("--protocol", required=True)
    p.add_argument("--voltages", required=True, help="true amplitudes CSV (e.g. forward output)")
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None, help="fixed noise std, V")
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW)
    p.add_argument("--fs", type=float, default=DEFAULT_FS)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--timeseries", action="store_true", help="also write one frame's raw samples")
    p.add_argument("--output", default="frames.csv")

    p = sub.add_parser("scenario", help="run a declarative scenario config")
    p.add_argument("config")
    return ap


def _run(args) -> int:
    out = args.out_dir if args.out_dir is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    started = _stamp()
    with threadpool_limits(args.threads):
        result = COMMANDS[args.command](args, out)
    if len(result) == 3:
        inputs, outputs, out = result
    else:
        inputs, outputs = result
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    manifest = RunManifest(
        tool="fdmeit",
        version=__version__,
        subcommand=args.command,
        seed=args.seed,
        threads=args.threads,
        parameters=params,
        inputs={str(p): file_digest(p) for p in inputs},
        outputs={str(p.relative_to(out)) if p.is_relative_to(out) else str(p): file_digest(p) for p in outputs},
        started=started,
        finished=_stamp(),
    )
    manifest.write(out / f"manifest-{args.command}.json")
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error[validation]: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return _run(args)
    except (SolverError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"error[numerical]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, MeshError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error[validation]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
