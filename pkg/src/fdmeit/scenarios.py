"""Synthetic actuation experiments driving the full pipeline.

Shape change is represented as a conductivity change on the fixed reference
mesh.  An actuator is a set of electrically independent compartments, each
with its own mesh and part of the protocol: the hinged actuator is one
compartment, the finger has two (one per hydraulic chamber).
"""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .fdm import (
    DEFAULT_FS,
    DEFAULT_WINDOW,
    NOISELESS,
    NoiseModel,
    VoltageFrame,
    analytic_noise_std,
    channel_pairs,
    compute_snr,
    demodulate_frame,
    save_frames_csv,
    synthesize_frame,
)
from .forward import (
    DEFAULT_AMPLITUDE,
    CemSystem,
    ConductivityField,
    InjectionTone,
    Protocol,
    assemble_cem_system,
    forward_all,
    hinged_protocol,
    load_protocol,
)
from .inverse import (
    CrossValidationReport,
    GaussianNoise,
    ReconstructionOperator,
    ReconstructionResult,
    build_operator,
    random_perturbations,
    reconstruct,
    save_reconstruction_csv,
    select_lambda_cv,
)
from .mesh import (
    ElectrodePatch,
    FingerChamberParams,
    HingedActuatorParams,
    Mesh,
    generate_finger_chamber_mesh,
    generate_hinged_actuator_mesh,
    load_mesh,
    refine_near_electrodes,
)
from .sensitivity import Jacobian, aggregate_to_hex, compute_jacobian

logger = logging.getLogger(__name__)

SIGMA0 = 0.2
BASELINE_STREAM = 1_000_003


# -- states and the bend surrogate ------------------------------------------------


@dataclass(frozen=True)
class BendState:
    """Hinge angles in degrees (hinged actuator) or chamber pressures in bar (finger)."""

    angle1: float = 0.0
    angle2: float = 0.0
    pressure1: float = 0.0
    pressure2: float = 0.0

    def __post_init__(self):
        for name in ("angle1", "angle2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 90.0:
                raise ValueError(f"{name} must lie in [0, 90] degrees, got {v}")
        for name in ("pressure1", "pressure2"):
            v = getattr(self, name)
            if not 0.0 <= v < 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5) bar, got {v}")

    @property
    def is_baseline(self) -> bool:
        return self == BendState()

    def active_dofs(self) -> list[int]:
        return [k for k in (1, 2) if getattr(self, f"angle{k}") > 0 or getattr(self, f"pressure{k}") > 0]

    def label(self) -> str:
        if self.pressure1 or self.pressure2:
            return f"p1={self.pressure1:g},p2={self.pressure2:g}"
        return f"a1={self.angle1:g},a2={self.angle2:g}"


@dataclass(frozen=True)
class HingeResponse:
    """Relative hinge conductivity g(angle); g(0) = 1.

    Below ``knee`` the hinge swells slightly (``bump``); past it the
    cross-section collapses quadratically down to ``1 - drop`` at 90 degrees.
    ``slope`` adds a linear decrease over the whole range.
    """

    bump: float = 0.0
    drop: float = 0.0
    slope: float = 0.0
    knee: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.knee < 90.0:
            raise ValueError("knee angle must lie strictly between 0 and 90 degrees")
        if self.drop + self.slope >= 1.0:
            raise ValueError("hinge response would make conductivity non-positive")

    def __call__(self, angle: float) -> float:
        a = float(angle)
        if a <= self.knee:
            g = 1.0 + self.bump * math.sin(math.pi * a / self.knee)
        else:
            g = 1.0 - self.drop * ((a - self.knee) / (90.0 - self.knee)) ** 2
        return g - self.slope * a / 90.0


@dataclass(frozen=True)
class SurrogateParams:
    """Free parameters of the shape-to-conductivity surrogate.

    ``chamber_coupling`` transfers a fraction of the hinge change to the
    outboard chamber next to it; ``pressure_gain`` is the relative change in
    a finger chamber's conductivity per bar.
    """

    hinge1: HingeResponse = HingeResponse(bump=0.08, drop=0.45)
    hinge2: HingeResponse = HingeResponse(slope=0.35)
    chamber_coupling: float = 0.5
    pressure_gain: float = 0.6


OUTBOARD_CHAMBER = {1: "chamber-1", 2: "chamber-3"}


def bend_to_conductivity(
    mesh,
    state: BendState,
    params: SurrogateParams | None = None,
    sigma0: float | ConductivityField = SIGMA0,
) -> ConductivityField:
    """Conductivity of ``state`` on the reference mesh (or actuator model).

    Hinge angles need regions ``hinge-1``/``hinge-2``; finger pressures act
    on ``chamber-1``/``chamber-2`` of a mesh without hinges.
    """
    params = params or SurrogateParams()
    if mesh.region_tags is None or not mesh.region_names:
        raise ValueError("bend surrogate needs a mesh with tagged regions")
    names = set(mesh.region_names.values())
    base = sigma0.values if isinstance(sigma0, ConductivityField) else np.full(mesh.n_elements, float(sigma0))
    scale = np.ones(mesh.n_elements)
    hinged = {"hinge-1", "hinge-2"} <= names
    if state.angle1 or state.angle2:
        if not hinged:
            raise ValueError("hinge angles given for a mesh without hinge regions")
        for k, resp in ((1, params.hinge1), (2, params.hinge2)):
            g = resp(getattr(state, f"angle{k}"))
            scale[mesh.region_mask(f"hinge-{k}")] *= g
            scale[mesh.region_mask(OUTBOARD_CHAMBER[k])] *= 1.0 + params.chamber_coupling * (g - 1.0)
    if state.pressure1 or state.pressure2:
        if hinged or not {"chamber-1", "chamber-2"} <= names:
            raise ValueError("chamber pressures apply to the two-chamber finger only")
        for k in (1, 2):
            scale[mesh.region_mask(f"chamber-{k}")] *= 1.0 + params.pressure_gain * getattr(state, f"pressure{k}")
    return ConductivityField(base * scale)


def parse_sweep(spec: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    spec = spec.strip()
    if ":" in spec:
        start, stop, step = (float(s) for s in spec.split(":"))
        if step <= 0:
            raise ValueError(f"sweep step must be positive in {spec!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [start + k * step for k in range(n)]
    return [float(s) for s in spec.split(",") if s.strip()]


# -- actuator models ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Compartment:
    """One conducting volume placed at ``offset`` (mm) in the actuator frame."""

    mesh: Mesh
    protocol: Protocol
    offset: tuple[float, ...] = (0.0, 0.0, 0.0)
    names: dict[int, str] | None = None

    def region_name(self, tag: int) -> str:
        if self.names and tag in self.names:
            return self.names[tag]
        return self.mesh.region_names.get(int(tag), f"region-{tag}")


@dataclass(frozen=True)
class DofInfo:
    """Injections whose response should follow this DOF, and those that should not."""

    same: tuple[int, ...]
    cross: tuple[int, ...]
    regions: tuple[str, ...]


class ActuatorModel:
    """Independent compartments stacked into one element vector and one protocol."""

    def __init__(self, name: str, compartments: Sequence[Compartment], dofs: dict[int, DofInfo], sigma0: float = SIGMA0):
        self.name = name
        self.compartments = tuple(compartments)
        self.dofs = dict(dofs)
        self.sigma0 = float(sigma0)
        injections, measurements = [], []
        for c in self.compartments:
            c.protocol.check_against(c.mesh)
            injections += c.protocol.injections
            measurements += c.protocol.measurements
        self.protocol = Protocol(tuple(injections), tuple(measurements))
        sizes = [c.mesh.n_elements for c in self.compartments]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_elements = int(self.offsets[-1])
        m_sizes = [c.protocol.n_measurements for c in self.compartments]
        self.m_offsets = np.concatenate([[0], np.cumsum(m_sizes)])

        labels = [c.region_name(t) for c in self.compartments for t in c.mesh.region_tags.tolist()]
        uniq = sorted(set(labels))
        self.region_names = {k + 1: n for k, n in enumerate(uniq)}
        lookup = {n: k for k, n in self.region_names.items()}
        self.region_tags = np.array([lookup[n] for n in labels], dtype=np.int64)
        self.centroids = np.vstack([c.mesh.centroids + np.asarray(c.offset) for c in self.compartments])
        self.volumes = np.concatenate([c.mesh.volumes for c in self.compartments])
        self._tree = cKDTree(self.centroids)
        self._systems: list[CemSystem] | None = None

    def __repr__(self):
        return f"ActuatorModel({self.name!r}, {len(self.compartments)} compartments, {self.n_elements} elements)"

    @property
    def chambers(self) -> list[str]:
        return sorted(n for n in self.region_names.values() if n.startswith("chamber"))

    def region_mask(self, name: str) -> np.ndarray:
        tags = [k for k, n in self.region_names.items() if n == name]
        if not tags:
            raise KeyError(f"no region named {name!r}")
        return self.region_tags == tags[0]

    def region_at(self, points: np.ndarray) -> list[str]:
        """Region of the element whose centroid is nearest each point."""
        _, idx = self._tree.query(np.atleast_2d(points))
        return [self.region_names[int(self.region_tags[i])] for i in np.atleast_1d(idx)]

    def baseline(self) -> ConductivityField:
        return ConductivityField(np.full(self.n_elements, self.sigma0))

    def split(self, sigma: ConductivityField) -> list[ConductivityField]:
        v = sigma.values
        if v.size != self.n_elements:
            raise ValueError(f"conductivity has {v.size} values, model has {self.n_elements} elements")
        return [ConductivityField(v[a:b]) for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def systems(self) -> list[CemSystem]:
        if self._systems is None:
            self._systems = [assemble_cem_system(c.mesh, s) for c, s in zip(self.compartments, self.split(self.baseline()))]
        return self._systems

    def forward(self, sigma: ConductivityField) -> np.ndarray:
        out = []
        for c, base, s in zip(self.compartments, self.systems(), self.split(sigma)):
            out.append(forward_all(c.mesh, s, c.protocol, base.with_sigma(s)))
        return np.concatenate(out)

    def jacobian(self) -> Jacobian:
        blocks = [
            compute_jacobian(c.mesh, s, c.protocol, sysm).matrix
            for c, s, sysm in zip(self.compartments, self.split(self.baseline()), self.systems())
        ]
        return Jacobian(scipy.linalg.block_diag(*blocks), {"model": self.name})

    def hex_jacobian(self, J: Jacobian, voxel_size: float) -> tuple[Jacobian, np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Voxel Jacobian, voxel centres (actuator frame) and a voxel-to-element map."""
        blocks, centres, subs = [], [], []
        for k, c in enumerate(self.compartments):
            r0, r1 = self.m_offsets[k], self.m_offsets[k + 1]
            e0, e1 = self.offsets[k], self.offsets[k + 1]
            Jk, sub = aggregate_to_hex(Jacobian(J.matrix[r0:r1, e0:e1]), c.mesh, voxel_size)
            blocks.append(Jk.matrix)
            centres.append(sub.voxel_centres() + np.asarray(c.offset))
            subs.append(sub)
        sizes = np.concatenate([[0], np.cumsum([b.shape[1] for b in blocks])])

        def to_elements(vox: np.ndarray) -> np.ndarray:
            return np.concatenate([s.to_elements(vox[a:b]) for s, a, b in zip(subs, sizes[:-1], sizes[1:])])

        prov = dict(J.provenance, voxel_size=repr(float(voxel_size)))
        return Jacobian(scipy.linalg.block_diag(*blocks), prov), np.vstack(centres), to_elements


def hinged_model(
    params: HingedActuatorParams | None = None,
    refine_radius: float = 6.0,
    refine_factor: float = 2.0,
    sigma0: float = SIGMA0,
    protocol: Protocol | None = None,
    mesh: Mesh | None = None,
) -> ActuatorModel:
    if mesh is None:
        mesh = generate_hinged_actuator_mesh(params)
        if refine_factor > 1:
            mesh = refine_near_electrodes(mesh, refine_radius, refine_factor)
    protocol = protocol or hinged_protocol()
    dofs = {}
    inj = {(t.source, t.sink): i for i, t in enumerate(protocol.injections)}
    if (2, 3) in inj and (4, 5) in inj:
        dofs = {
            1: DofInfo((inj[(2, 3)],), (inj[(4, 5)],), ("hinge-1", "chamber-1")),
            2: DofInfo((inj[(4, 5)],), (inj[(2, 3)],), ("hinge-2", "chamber-3")),
        }
    return ActuatorModel("hinged", [Compartment(mesh, protocol)], dofs, sigma0)


FINGER_FREQUENCIES = (2000.0, 12000.0)


def finger_model(
    params: FingerChamberParams | None = None,
    sigma0: float = SIGMA0,
    amplitude: float = DEFAULT_AMPLITUDE,
    frequencies: tuple[float, float] = FINGER_FREQUENCIES,
    first_offset: float = 30.0,
    spacing: float = 25.0,
) -> ActuatorModel:
    """Two hydraulic chambers along the finger, ``spacing`` mm apart.

    Chamber 2 carries electrodes 3 and 4; each chamber is driven and
    measured across its own pair at its own frequency.
    """
    p = params or FingerChamberParams()
    base = generate_finger_chamber_mesh(p)
    second = base.with_electrodes([ElectrodePatch(e.id + 2, e.facets, e.z) for e in base.electrodes])
    comps = []
    for k, (mesh, (a, b), f) in enumerate(zip((base, second), ((1, 2), (3, 4)), frequencies)):
        prot = Protocol((InjectionTone(a, b, amplitude, f),), (((a, b),),))
        x0 = first_offset + k * (p.length + spacing)
        comps.append(Compartment(mesh, prot, (x0, 0.0, 0.0), {1: f"chamber-{k + 1}"}))
    dofs = {1: DofInfo((0,), (1,), ("chamber-1",)), 2: DofInfo((1,), (0,), ("chamber-2",))}
    return ActuatorModel("finger", comps, dofs, sigma0)


# -- measurement ---------------------------------------------------------------------


def _channel_scale(protocol: Protocol, voltages: np.ndarray) -> np.ndarray:
    """Summed tone amplitude on the channel of each measurement."""
    pairs = channel_pairs(protocol)
    chan = {p: k for k, p in enumerate(pairs)}
    scale = np.zeros(len(pairs))
    for m, (_, pair) in enumerate(protocol.flat()):
        scale[chan[pair]] += abs(voltages[m])
    return np.array([scale[chan[pair]] for _, pair in protocol.flat()])


def noise_for_snr(snr_db: float, protocol: Protocol | None = None, voltages: np.ndarray | None = None,
                  window: float = DEFAULT_WINDOW, fs: float = DEFAULT_FS, **kw) -> NoiseModel:
    """Signal-proportional noise whose mean per-measurement SNR is ``snr_db``.

    Noise on a channel scales with its summed tone amplitude, so the SNR of a
    small tone sharing a channel with large ones sits below the mean.  Without
    a protocol the target applies to the channel's summed amplitude.
    """
    offset = 0.0
    if protocol is not None:
        v = np.abs(np.asarray(voltages, dtype=float))
        if not (v > 0).all():
            raise ValueError("per-measurement SNR needs non-zero voltages")
        offset = float(np.mean(20 * np.log10(v / _channel_scale(protocol, v))))
    return NoiseModel(relative_std=analytic_noise_std(snr_db - offset, 1.0, fs, window), **kw)


def amplitude_noise_std(protocol: Protocol, voltages: np.ndarray, noise: NoiseModel,
                        window: float = DEFAULT_WINDOW, fs: float = DEFAULT_FS) -> np.ndarray:
    """Predicted std of each demodulated amplitude (quantisation ignored)."""
    scale = _channel_scale(protocol, voltages)
    return np.sqrt(noise.std**2 + (noise.relative_std * scale) ** 2) * math.sqrt(2.0 / (window * fs))


def _frame(protocol, voltages, noise, rng, window, fs, t0=0.0) -> VoltageFrame:
    ts = synthesize_frame(protocol, voltages, fs, window, noise, rng, t0=t0)
    return demodulate_frame(ts, protocol, window)


def baseline_frame(protocol: Protocol, voltages: np.ndarray, noise: NoiseModel, n_frames: int,
                   seed: int, window: float = DEFAULT_WINDOW, fs: float = DEFAULT_FS) -> VoltageFrame:
    """Reference frame: mean of ``n_frames`` noisy frames (one frame when noiseless)."""
    rng = np.random.default_rng([seed, BASELINE_STREAM])
    noisy = noise.std > 0 or noise.relative_std > 0
    frames = [_frame(protocol, voltages, noise, rng, window, fs, k * window) for k in range(n_frames if noisy else 1)]
    amps = np.mean([f.signed() for f in frames], axis=0) if len(frames) > 1 else frames[0].signed()
    return VoltageFrame(np.abs(amps), np.where(amps < 0, np.pi, 0.0), window, 0.0, np.zeros(amps.size))


# -- traces --------------------------------------------------------------------------


@dataclass(frozen=True)
class Localization:
    """Top-decile |delta sigma| centroid (mm), the region holding it and the regions it should be in."""

    centroid: np.ndarray
    region: str
    expected: tuple[str, ...] | None
    sign: float

    @property
    def inside(self) -> bool | None:
        return None if self.expected is None else self.region in self.expected


@dataclass(frozen=True, eq=False)
class TraceEntry:
    state: BendState
    repeat: int
    sigma: ConductivityField
    true_voltages: np.ndarray
    frame: VoltageFrame
    delta_v: np.ndarray
    reconstruction: ReconstructionResult | None = None
    voxel_image: np.ndarray | None = None
    localization: Localization | None = None


@dataclass(frozen=True, eq=False)
class ScenarioTrace:
    protocol: Protocol
    baseline: VoltageFrame
    baseline_voltages: np.ndarray
    entries: tuple[TraceEntry, ...]
    seed: int = 0

    def __len__(self):
        return len(self.entries)

    def delta_matrix(self) -> np.ndarray:
        return np.array([e.delta_v for e in self.entries])

    def states(self) -> list[BendState]:
        return [e.state for e in self.entries]


def run_static_sweep(
    model: ActuatorModel,
    states: Sequence[BendState],
    noise: NoiseModel | None = None,
    repeats: int = 3,
    seed: int = 0,
    params: SurrogateParams | None = None,
    baseline_frames: int = 10,
    window: float = DEFAULT_WINDOW,
    fs: float = DEFAULT_FS,
) -> ScenarioTrace:
    """One frame per state and repeat, each referenced to the (0, 0) baseline.

    Entry (state i, repeat r) draws its noise from the stream [seed, i, r],
    so traces are reproducible and independent of evaluation order.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    noise = noise or NOISELESS
    v0 = model.forward(model.baseline())
    ref = baseline_frame(model.protocol, v0, noise, baseline_frames, seed, window, fs)
    entries = []
    for i, state in enumerate(states):
        sigma = bend_to_conductivity(model, state, params, model.sigma0)
        v = v0 if state.is_baseline else model.forward(sigma)
        for r in range(repeats):
            rng = np.random.default_rng([seed, i, r])
            frame = _frame(model.protocol, v, noise, rng, window, fs)
            entries.append(TraceEntry(state, r, sigma, v, frame, frame.signed() - ref.signed()))
    return ScenarioTrace(model.protocol, ref, v0, tuple(entries), seed)


def isolation_ratios(trace: ScenarioTrace, model: ActuatorModel) -> dict[int, float]:
    """Largest cross-DOF over same-DOF injection response, per DOF, over single-DOF states."""
    out = {}
    inj_of = np.array([i for i, _ in model.protocol.flat()])
    for k, info in model.dofs.items():
        same = np.isin(inj_of, info.same)
        cross = np.isin(inj_of, info.cross)
        dv = np.array([e.delta_v for e in trace.entries if e.state.active_dofs() == [k]])
        if dv.size == 0:
            continue
        s = np.abs(dv[:, same]).max()
        out[k] = float(np.abs(dv[:, cross]).max() / s) if s > 0 else float("inf")
    return out


def linear_fit_r2(x: np.ndarray, y: np.ndarray) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(((y - A @ coef) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


# -- resistor phantom ------------------------------------------------------------------


@dataclass(frozen=True)
class ResistorPhantom:
    """Purely resistive loads (ohm), one recording channel each."""

    loads: tuple[float, ...]

    def __post_init__(self):
        loads = tuple(float(r) for r in self.loads)
        if not loads:
            raise ValueError("phantom needs at least one load")
        if any(not r > 0 or not math.isfinite(r) for r in loads):
            raise ValueError(f"loads must be positive, got {loads}")
        object.__setattr__(self, "loads", loads)


def phantom_frequencies(n: int = 6, lo: float = 2000.0, hi: float = 12000.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


@dataclass(frozen=True, eq=False)
class PhantomReport:
    """``estimates`` is (repeats, loads, frequencies) in ohm."""

    frequencies: np.ndarray
    loads: np.ndarray
    estimates: np.ndarray
    snr_db: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def relative_spread(self) -> np.ndarray:
        """(max - min) / mean of the per-frequency mean estimates, per load."""
        m = self.mean
        return (m.max(axis=1) - m.min(axis=1)) / m.mean(axis=1)

    @property
    def max_relative_spread(self) -> float:
        return float(self.relative_spread.max())


def phantom_protocol(n_loads: int, frequencies: Sequence[float], amplitude: float = DEFAULT_AMPLITUDE) -> Protocol:
    """Every tone drives every load; load l is recorded across electrodes (2l+1, 2l+2)."""
    pairs = tuple((2 * l + 1, 2 * l + 2) for l in range(n_loads))
    inj = tuple(InjectionTone(1, 2, amplitude, float(f)) for f in frequencies)
    return Protocol(inj, (pairs,) * len(inj))


def run_resistor_phantom(
    phantom: ResistorPhantom,
    frequencies: Sequence[float] | None = None,
    window: float = DEFAULT_WINDOW,
    noise: NoiseModel | None = None,
    repeats: int = 100,
    amplitude: float = DEFAULT_AMPLITUDE,
    fs: float = DEFAULT_FS,
    seed: int = 0,
) -> PhantomReport:
    """Ohmic loads under all tones at once; R is estimated per tone as amplitude / current."""
    freqs = phantom_frequencies() if frequencies is None else np.asarray(frequencies, dtype=float)
    noise = noise or NOISELESS
    loads = np.array(phantom.loads)
    prot = phantom_protocol(len(loads), freqs, amplitude)
    truth = np.tile(amplitude * loads, len(freqs))
    rng = np.random.default_rng(seed)
    frames = [_frame(prot, truth, noise, rng, window, fs, k * window) for k in range(repeats)]
    est = np.stack([f.amplitudes.reshape(len(freqs), len(loads)).T / amplitude for f in frames])
    snr = compute_snr(frames, min_frames=min(10, repeats)).reshape(len(freqs), len(loads)).T
    return PhantomReport(freqs, loads, est, snr)


# -- reconstruction -----------------------------------------------------------------------


@dataclass(frozen=True)
class InverseConfig:
    """Voxel size (mm), fixed lambda or cross-validation settings.

    CV training perturbations are random-amplitude changes of one region at
    a time, up to ``cv_amplitude`` times the background conductivity.
    """

    voxel_size: float = 10.0
    lam: float | None = None
    cv_perturbations: int = 100
    cv_amplitude: float = 0.05
    cv_folds: int = 5


@dataclass(frozen=True, eq=False)
class InverseSetup:
    jacobian: Jacobian
    voxel_jacobian: Jacobian
    voxel_centres: np.ndarray
    voxel_regions: np.ndarray
    to_elements: Callable[[np.ndarray], np.ndarray]
    operator: ReconstructionOperator
    cv: CrossValidationReport | None


def build_inverse(model: ActuatorModel, config: InverseConfig | None = None, noise: NoiseModel | None = None,
                  seed: int = 0, window: float = DEFAULT_WINDOW, fs: float = DEFAULT_FS) -> InverseSetup:
    config = config or InverseConfig()
    J = model.jacobian()
    Jv, centres, to_elements = model.hex_jacobian(J, config.voxel_size)
    regions = np.array(model.region_at(centres))
    report = None
    lam = config.lam
    if lam is None:
        v0 = model.forward(model.baseline())
        std = amplitude_noise_std(model.protocol, v0, noise or NOISELESS, window, fs)
        rng = np.random.default_rng([seed, 7])
        X = random_perturbations(Jv.shape[1], config.cv_perturbations, rng, regions,
                                 config.cv_amplitude * model.sigma0)
        report = select_lambda_cv(Jv, GaussianNoise(std, seed), training_perturbations=X, n_folds=config.cv_folds)
        lam = report.lam
    return InverseSetup(J, Jv, centres, regions, to_elements, build_operator(Jv, lam), report)


def localize(values: np.ndarray, points: np.ndarray, model: ActuatorModel,
             expected: tuple[str, ...] | None = None) -> Localization:
    """Centroid of the top-decile |values| (weighted by |value|) and its region."""
    a = np.abs(values)
    if not a.any():
        return Localization(np.full(points.shape[1], np.nan), "none", expected, 0.0)
    sel = a >= np.quantile(a, 0.9)
    c = (a[sel, None] * points[sel]).sum(axis=0) / a[sel].sum()
    return Localization(c, model.region_at(c)[0], expected, float(np.sign(values[sel].sum())))


def expected_regions(model: ActuatorModel, state: BendState, sigma: ConductivityField) -> tuple[str, ...] | None:
    """Neighbourhood of the single moving DOF; None for combined or null changes."""
    dofs = state.active_dofs()
    if len(dofs) != 1 or dofs[0] not in model.dofs or np.all(sigma.values == model.sigma0):
        return None
    return model.dofs[dofs[0]].regions


def run_reconstruction_experiment(
    model: ActuatorModel,
    states: Sequence[BendState],
    inverse: InverseConfig | InverseSetup | None = None,
    noise: NoiseModel | None = None,
    repeats: int = 1,
    seed: int = 0,
    params: SurrogateParams | None = None,
    baseline_frames: int = 10,
    window: float = DEFAULT_WINDOW,
    fs: float = DEFAULT_FS,
) -> tuple[ScenarioTrace, InverseSetup]:
    """Sweep ``states`` through acquisition and imaging; each entry carries its image and localization."""
    noise = noise or NOISELESS
    setup = inverse if isinstance(inverse, InverseSetup) else build_inverse(model, inverse, noise, seed, window, fs)
    trace = run_static_sweep(model, states, noise, repeats, seed, params, baseline_frames, window, fs)
    entries = []
    for e in trace.entries:
        res = reconstruct(setup.operator, e.delta_v)
        loc = localize(res.delta_sigma, setup.voxel_centres, model, expected_regions(model, e.state, e.sigma))
        entries.append(replace(e, reconstruction=res, voxel_image=res.delta_sigma, localization=loc))
    return replace(trace, entries=tuple(entries)), setup


@dataclass(frozen=True, eq=False)
class LocalizationTrials:
    """Outcomes of random single-chamber perturbations, keyed by chamber."""

    results: dict[str, list[Localization]]
    amplitudes: dict[str, list[float]]

    def hits(self, chamber: str) -> int:
        return sum(bool(r.inside) for r in self.results[chamber])

    @property
    def passed(self) -> bool:
        return all(self.hits(c) == len(r) for c, r in self.results.items())


def run_localization_trials(
    model: ActuatorModel,
    setup: InverseSetup,
    n_trials: int = 10,
    noise: NoiseModel | None = None,
    seed: int = 0,
    amplitude_range: tuple[float, float] = (0.1, 0.3),
    baseline_frames: int = 10,
    window: float = DEFAULT_WINDOW,
    fs: float = DEFAULT_FS,
) -> LocalizationTrials:
    """Scale one whole chamber by 1 +/- U(amplitude_range) and image it through the full chain."""
    noise = noise or NOISELESS
    v0 = model.forward(model.baseline())
    ref = baseline_frame(model.protocol, v0, noise, baseline_frames, seed, window, fs)
    results, amps = {}, {}
    for ci, chamber in enumerate(model.chambers):
        mask = model.region_mask(chamber)
        results[chamber], amps[chamber] = [], []
        for k in range(n_trials):
            rng = np.random.default_rng([seed, 11, ci, k])
            amp = float(rng.choice([-1.0, 1.0]) * rng.uniform(*amplitude_range))
            sigma = ConductivityField(np.where(mask, model.sigma0 * (1 + amp), model.sigma0))
            frame = _frame(model.protocol, model.forward(sigma), noise, rng, window, fs)
            res = reconstruct(setup.operator, frame.signed() - ref.signed())
            results[chamber].append(localize(res.delta_sigma, setup.voxel_centres, model, (chamber,)))
            amps[chamber].append(amp)
    return LocalizationTrials(results, amps)


# -- declarative configs ----------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    actuator: str = "hinged"
    mesh: Path | None = None
    protocol: Path | None = None
    refine_radius: float = 6.0
    refine_factor: float = 2.0
    sigma0: float = SIGMA0
    states: tuple[BendState, ...] = ()
    repeats: int = 1
    baseline_frames: int = 10
    snr_db: float | None = 66.0
    noise_std: float = 0.0
    quantize: bool = True
    full_scale: float = 10.0
    fs: float = DEFAULT_FS
    window: float = DEFAULT_WINDOW
    inverse: InverseConfig = field(default_factory=InverseConfig)
    surrogate: SurrogateParams = field(default_factory=SurrogateParams)
    trials: int = 10
    amplitude_range: tuple[float, float] = (0.1, 0.3)
    isolation_threshold: float = 0.05
    output: Path | None = None

    def noise(self, protocol: Protocol, voltages: np.ndarray, seed: int = 0) -> NoiseModel:
        """Noise model reaching ``snr_db`` on average over the baseline measurements."""
        rel = 0.0
        if self.snr_db is not None:
            rel = noise_for_snr(self.snr_db, protocol, voltages, self.window, self.fs).relative_std
        return NoiseModel(self.noise_std, rel, self.full_scale, quantize=self.quantize, seed=seed)

    def build_model(self) -> ActuatorModel:
        if self.actuator == "hinged":
            mesh = load_mesh(self.mesh) if self.mesh else None
            protocol = load_protocol(self.protocol) if self.protocol else None
            return hinged_model(None, self.refine_radius, self.refine_factor, self.sigma0, protocol, mesh)
        if self.actuator == "finger":
            if self.mesh or self.protocol:
                raise ValueError("the finger model is generated; mesh and protocol files are not used")
            return finger_model(sigma0=self.sigma0)
        raise ValueError(f"unknown actuator {self.actuator!r} (expected 'hinged' or 'finger')")


def _state_list(actuator: str, section) -> list[BendState]:
    keys = ("pressure1", "pressure2") if actuator == "finger" else ("angle1", "angle2")
    states = [BendState()]
    for k in keys:
        spec = section.get(f"sweep_{k}")
        if spec:
            states += [BendState(**{k: v}) for v in parse_sweep(spec) if v != 0]
    listed = section.get("list", "")
    for item in (s for s in listed.split(";") if s.strip()):
        a, b = (float(x) for x in item.split(","))
        states.append(BendState(**{keys[0]: a, keys[1]: b}))
    return states


CONFIG_KEYS = {
    "scenario": {"actuator", "mesh", "protocol", "refine_radius", "refine_factor", "sigma0", "repeats", "baseline_frames"},
    "states": {"sweep_angle1", "sweep_angle2", "sweep_pressure1", "sweep_pressure2", "list"},
    "noise": {"snr_db", "std", "quantize", "full_scale"},
    "acquisition": {"fs", "window"},
    "inverse": {"voxel_size", "lambda", "cv_perturbations", "cv_amplitude", "cv_folds"},
    "surrogate": {"knee", "chamber_coupling", "pressure_gain"}
    | {f"hinge{k}_{p}" for k in (1, 2) for p in ("bump", "drop", "slope")},
    "localization": {"trials", "amplitude_min", "amplitude_max", "isolation_threshold"},
    "output": {"dir"},
}


def load_scenario_config(path) -> ScenarioConfig:
    """Parse an INI scenario file; relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if not cp.read(path):
        raise FileNotFoundError(f"{path}: cannot read scenario config")
    unknown = set(cp.sections()) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown sections {sorted(unknown)}")
    for name in cp.sections():
        extra = set(cp[name]) - CONFIG_KEYS[name] - set(cp.defaults())
        if extra:
            raise ValueError(f"{path}: unknown keys in [{name}]: {sorted(extra)}")
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    base = path.parent

    def rel(v):
        return (base / v).resolve() if v else None

    def sect(name):
        return cp[name] if cp.has_section(name) else cp["DEFAULT"]

    actuator = sc.get("actuator", "hinged").strip()
    noise, acq, inv, sur, loc = sect("noise"), sect("acquisition"), sect("inverse"), sect("surrogate"), sect("localization")
    lam = inv.get("lambda", "cv").strip()
    defaults = SurrogateParams()
    try:
        inverse = InverseConfig(
            voxel_size=inv.getfloat("voxel_size", 10.0),
            lam=None if lam == "cv" else float(lam),
            cv_perturbations=inv.getint("cv_perturbations", 100),
            cv_amplitude=inv.getfloat("cv_amplitude", 0.05),
            cv_folds=inv.getint("cv_folds", 5),
        )
        surrogate = SurrogateParams(
            HingeResponse(sur.getfloat("hinge1_bump", defaults.hinge1.bump), sur.getfloat("hinge1_drop", defaults.hinge1.drop),
                          sur.getfloat("hinge1_slope", defaults.hinge1.slope), sur.getfloat("knee", defaults.hinge1.knee)),
            HingeResponse(sur.getfloat("hinge2_bump", defaults.hinge2.bump), sur.getfloat("hinge2_drop", defaults.hinge2.drop),
                          sur.getfloat("hinge2_slope", defaults.hinge2.slope), sur.getfloat("knee", defaults.hinge2.knee)),
            sur.getfloat("chamber_coupling", defaults.chamber_coupling),
            sur.getfloat("pressure_gain", defaults.pressure_gain),
        )
        snr = noise.get("snr_db", "66").strip()
        out = cp.get("output", "dir", fallback=None)
        return ScenarioConfig(
            actuator=actuator,
            mesh=rel(sc.get("mesh")),
            protocol=rel(sc.get("protocol")),
            refine_radius=float(sc.get("refine_radius", 6.0)),
            refine_factor=float(sc.get("refine_factor", 2.0)),
            sigma0=float(sc.get("sigma0", SIGMA0)),
            states=tuple(_state_list(actuator, sect("states"))),
            repeats=int(sc.get("repeats", 1)),
            baseline_frames=int(sc.get("baseline_frames", 10)),
            snr_db=None if snr == "none" else float(snr),
            noise_std=noise.getfloat("std", 0.0),
            quantize=noise.getboolean("quantize", True),
            full_scale=noise.getfloat("full_scale", 10.0),
            fs=acq.getfloat("fs", DEFAULT_FS),
            window=acq.getfloat("window", DEFAULT_WINDOW),
            inverse=inverse,
            surrogate=surrogate,
            trials=loc.getint("trials", 10),
            amplitude_range=(loc.getfloat("amplitude_min", 0.1), loc.getfloat("amplitude_max", 0.3)),
            isolation_threshold=loc.getfloat("isolation_threshold", 0.05),
            output=rel(out),
        )
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


@dataclass(frozen=True, eq=False)
class ScenarioOutcome:
    trace: ScenarioTrace
    setup: InverseSetup
    trials: LocalizationTrials
    isolation: dict[int, float]
    passed: bool
    summary: str


def run_scenario(config: ScenarioConfig, seed: int = 0, model: ActuatorModel | None = None) -> ScenarioOutcome:
    model = model or config.build_model()
    noise = config.noise(model.protocol, model.forward(model.baseline()), seed)
    setup = build_inverse(model, config.inverse, noise, seed, config.window, config.fs)
    trace, _ = run_reconstruction_experiment(
        model, config.states, setup, noise, config.repeats, seed, config.surrogate,
        config.baseline_frames, config.window, config.fs,
    )
    trials = run_localization_trials(model, setup, config.trials, noise, seed, config.amplitude_range,
                                     config.baseline_frames, config.window, config.fs)
    iso = isolation_ratios(trace, model)
    iso_ok = all(r < config.isolation_threshold for r in iso.values())
    images_ok = all(e.localization.inside is not False for e in trace.entries)
    passed = trials.passed and iso_ok and images_ok
    summary = format_summary(model, config, setup, trace, trials, iso, passed)
    return ScenarioOutcome(trace, setup, trials, iso, passed, summary)


def format_summary(model, config, setup, trace, trials, iso, passed) -> str:
    lines = [
        "SCENARIO SUMMARY 1",
        f"actuator {model.name}",
        f"elements {model.n_elements}",
        f"voxels {setup.voxel_jacobian.shape[1]}",
        f"lambda {setup.operator.lam!r}",
        f"states {len({e.state for e in trace.entries})}",
        f"frames {len(trace)}",
    ]
    for chamber, res in trials.results.items():
        lines.append(f"localization {chamber} {trials.hits(chamber)}/{len(res)}")
    for k, r in sorted(iso.items()):
        status = "ok" if r < config.isolation_threshold else "FAIL"
        lines.append(f"isolation dof{k} {r:.4g} {status}")
    for i, e in enumerate(trace.entries):
        loc = e.localization
        if loc is None:
            continue
        flag = "-" if loc.inside is None else ("in" if loc.inside else "out")
        c = " ".join(f"{x:.2f}" for x in loc.centroid)
        lines.append(f"image {i} {e.state.label()} r{e.repeat} centroid {c} region {loc.region} sign {loc.sign:+.0f} {flag}")
    lines.append(f"result {'PASS' if passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def write_scenario_outputs(outcome: ScenarioOutcome, out_dir) -> list[Path]:
    """Frame CSV, delta-v CSV, one reconstruction CSV per entry and the summary report."""
    out = Path(out_dir)
    (out / "reconstructions").mkdir(parents=True, exist_ok=True)
    written = []
    frames = out / "frames.csv"
    save_frames_csv([e.frame for e in outcome.trace.entries], frames, signed=True)
    written.append(frames)
    dv = out / "delta_v.csv"
    header = "entry,state,repeat," + ",".join(f"m{m + 1}" for m in range(outcome.trace.protocol.n_measurements))
    rows = [header]
    for i, e in enumerate(outcome.trace.entries):
        rows.append(f"{i},{e.state.label().replace(',', ';')},{e.repeat}," + ",".join(repr(float(x)) for x in e.delta_v))
    dv.write_text("\n".join(rows) + "\n")
    written.append(dv)
    for i, e in enumerate(outcome.trace.entries):
        if e.reconstruction is None:
            continue
        p = out / "reconstructions" / f"entry_{i:03d}.csv"
        elem = outcome.setup.to_elements(e.reconstruction.delta_sigma)
        save_reconstruction_csv(replace(e.reconstruction, delta_sigma=elem), p)
        written.append(p)
    summary = out / "summary.txt"
    summary.write_text(outcome.summary)
    written.append(summary)
    return written
