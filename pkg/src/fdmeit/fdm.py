"""Frequency-division-multiplexed measurement chain.

All injections run at once, each at its own frequency.  Every recording
channel (one per distinct measurement pair) carries the sum of the tones
that reach it; a lock-in over an integer number of periods separates them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .forward import Protocol, unique_pairs

DEFAULT_FS = 50_000.0
DEFAULT_WINDOW = 0.020
MIN_WINDOW, MAX_WINDOW = 0.003, 0.250
ADC_BITS = 16


class LeakageWarning(UserWarning):
    pass


def _is_integer(x: float, tol: float = 1e-9) -> bool:
    return abs(x - round(x)) <= tol * max(1.0, abs(x))


# -- noise ---------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """White noise plus ADC quantisation.

    ``std`` is a fixed noise floor (V).  ``relative_std`` scales with the
    signal on each channel (the sum of its tone amplitudes), as noise on the
    injected current would.  ``full_scale`` is the symmetric ADC range used
    for quantisation; ``quantize=False`` disables it.
    """

    std: float = 0.0
    relative_std: float = 0.0
    full_scale: float = 10.0
    bits: int = ADC_BITS
    quantize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.std < 0 or self.relative_std < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.full_scale <= 0:
            raise ValueError("full scale must be positive")

    @property
    def step(self) -> float:
        return 2 * self.full_scale / 2**self.bits if self.quantize else 0.0

    def scaled(self, k: float) -> "NoiseModel":
        return NoiseModel(self.std * k, self.relative_std * k, self.full_scale, self.bits, self.quantize, self.seed)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


NOISELESS = NoiseModel(quantize=False)


# -- time series ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Sampled channels (rows) at rate ``fs``; ``t0`` is the first sample time."""

    fs: float
    samples: np.ndarray
    pairs: tuple[tuple[int, int], ...] = ()
    t0: float = 0.0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        if self.pairs and len(self.pairs) != s.shape[0]:
            raise ValueError("one measurement pair per channel is required")
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.fs


def channel_pairs(protocol: Protocol) -> list[tuple[int, int]]:
    return unique_pairs([pair for _, pair in protocol.flat()])


# -- orthogonality ---------------------------------------------------------------


@dataclass(frozen=True)
class OrthogonalityReport:
    passed: bool
    periods: dict[float, float]
    worst_leakage_db: float
    failures: tuple[str, ...] = ()


LEAKAGE_FLOOR_DB = -400.0


def tone_leakage(f_signal: float, f_ref: float, window: float, fs: float = DEFAULT_FS) -> float:
    """Worst-phase amplitude a unit tone at ``f_signal`` shows at a lock-in tuned to ``f_ref``."""
    n = int(round(window * fs))
    t = np.arange(n) / fs
    ref = np.exp(-2j * np.pi * f_ref * t)
    worst = 0.0
    for phase in np.linspace(0, np.pi, 8, endpoint=False):
        x = np.sin(2 * np.pi * f_signal * t + phase)
        worst = max(worst, 2 * abs(x @ ref) / n)
    return worst


def check_orthogonality(frequencies: Sequence[float], window: float, fs: float | None = DEFAULT_FS) -> OrthogonalityReport:
    """Pass iff every tone and every pairwise difference completes whole periods in ``window``.

    Worst-case inter-tone leakage (dB re. a unit tone) is always reported,
    computed on the sampled grid when ``fs`` is given.
    """
    if not window > 0:
        raise ValueError("window must be positive")
    freqs = [float(f) for f in frequencies]
    failures = []
    periods = {f: f * window for f in freqs}
    for f, p in periods.items():
        if not _is_integer(p):
            failures.append(f"{f:g} Hz completes {p:.6g} periods")
    for a, b in ((a, b) for i, a in enumerate(freqs) for b in freqs[i + 1:]):
        d = abs(a - b) * window
        if d == 0:
            failures.append(f"duplicate frequency {a:g} Hz")
        elif not _is_integer(d):
            failures.append(f"difference {a:g}-{b:g} Hz completes {d:.6g} periods")
    if fs is not None and not _is_integer(window * fs):
        failures.append(f"window holds {window * fs:.6g} samples")
    worst = 0.0
    if fs is not None and len(freqs) > 1:
        for a in freqs:
            for b in freqs:
                if a != b:
                    worst = max(worst, tone_leakage(a, b, window, fs))
    elif len(freqs) > 1:
        for a in freqs:
            for b in freqs:
                if a != b:
                    x = (a - b) * window
                    worst = max(worst, abs(math.sin(math.pi * x) / (math.pi * x)))
    db = 20 * math.log10(worst) if worst > 0 else LEAKAGE_FLOOR_DB
    return OrthogonalityReport(not failures, periods, max(db, LEAKAGE_FLOOR_DB), tuple(failures))


def allowed_windows(frequencies: Sequence[float], fs: float = DEFAULT_FS, lo: float = MIN_WINDOW, hi: float = MAX_WINDOW) -> list[float]:
    """All windows in [lo, hi] (whole samples) on which the tones are orthogonal."""
    # the shortest orthogonal window is the lcm of all tone periods and the sample period
    periods = [Fraction(1) / Fraction(f).limit_denominator(10**6) for f in frequencies]
    periods.append(Fraction(1) / Fraction(fs).limit_denominator(10**6))
    base = periods[0]
    for p in periods[1:]:
        base = Fraction(math.lcm(base.numerator, p.numerator), math.gcd(base.denominator, p.denominator))
    k0 = max(1, math.ceil(lo / base - 1e-12))
    out = []
    k = k0
    while float(k * base) <= hi + 1e-12:
        out.append(float(k * base))
        k += 1
    return out


# -- synthesis / demodulation ------------------------------------------------------


def synthesize_frame(
    protocol: Protocol,
    true_amplitudes: Sequence[float],
    fs: float = DEFAULT_FS,
    window: float = DEFAULT_WINDOW,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
    t0: float = 0.0,
    phases: Sequence[float] | None = None,
    check: bool = True,
) -> TimeSeries:
    """Multi-tone channel waveforms for one frame.

    ``true_amplitudes`` are the protocol voltages (injection-major); a
    negative value is a tone in antiphase.  ``phases`` are the per-injection
    source phases (default 0).
    """
    amps = np.asarray(true_amplitudes, dtype=np.float64)
    if amps.shape != (protocol.n_measurements,):
        raise ValueError(f"expected {protocol.n_measurements} amplitudes, got {amps.size}")
    freqs = protocol.frequencies
    if fs <= 2 * max(freqs):
        raise ValueError(f"sampling rate {fs} Hz violates Nyquist for {max(freqs)} Hz")
    if check:
        report = check_orthogonality(freqs, window, fs)
        if not report.passed:
            raise ValueError("tones are not orthogonal on this window: " + "; ".join(report.failures))
    noise = noise or NOISELESS
    n = int(round(window * fs))
    t = t0 + np.arange(n) / fs
    phases = np.zeros(len(freqs)) if phases is None else np.asarray(phases, dtype=float)
    pairs = channel_pairs(protocol)
    chan = {p: k for k, p in enumerate(pairs)}
    tones = np.sin(2 * np.pi * np.outer(freqs, t) + phases[:, None])
    x = np.zeros((len(pairs), n))
    scale = np.zeros(len(pairs))
    for m, (i, pair) in enumerate(protocol.flat()):
        x[chan[pair]] += amps[m] * tones[i]
        scale[chan[pair]] += abs(amps[m])
    if noise.std > 0 or noise.relative_std > 0:
        rng = rng if rng is not None else noise.rng()
        std = np.sqrt(noise.std**2 + (noise.relative_std * scale) ** 2)
        x = x + rng.standard_normal(x.shape) * std[:, None]
    if noise.quantize:
        step = noise.step
        x = np.clip(np.round(x / step) * step, -noise.full_scale, noise.full_scale - step)
    return TimeSeries(fs, x, tuple(pairs), t0)


def demodulate(
    ts: TimeSeries,
    frequency: float,
    window: float | None = None,
    start: int = 0,
    allow_leakage: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Lock-in amplitude and phase per channel over ``window`` seconds.

    amplitude = 2 |sum x exp(-i 2 pi f t)| / N.  Phase is that of a sine,
    x = A sin(2 pi f t + phase), with t the absolute sample time.
    """
    window = ts.duration if window is None else window
    n = int(round(window * ts.fs))
    if n <= 0 or start + n > ts.n_samples:
        raise ValueError(f"window of {window} s exceeds the {ts.duration} s series")
    if not _is_integer(frequency * n / ts.fs):
        msg = f"{frequency:g} Hz completes {frequency * n / ts.fs:.6g} periods in the window"
        if not allow_leakage:
            raise ValueError(msg)
        warnings.warn(msg + "; the estimate includes spectral leakage", LeakageWarning, stacklevel=2)
    t = ts.t0 + (start + np.arange(n)) / ts.fs
    ref = np.exp(-2j * np.pi * frequency * t)
    c = ts.samples[:, start:start + n] @ ref / n
    return 2 * np.abs(c), np.angle(c) + np.pi / 2


@dataclass(frozen=True, eq=False)
class VoltageFrame:
    """Demodulated amplitude (V) and phase (rad) per protocol measurement."""

    amplitudes: np.ndarray
    phases: np.ndarray
    window: float
    timestamp: float = 0.0
    reference_phases: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def signed(self) -> np.ndarray:
        """Amplitudes signed by whether the tone is in phase with its source."""
        ref = self.reference_phases if self.reference_phases.size else np.zeros_like(self.phases)
        return self.amplitudes * np.where(np.cos(self.phases - ref) >= 0, 1.0, -1.0)


def demodulate_frame(ts: TimeSeries, protocol: Protocol, window: float | None = None,
                     phases: Sequence[float] | None = None) -> VoltageFrame:
    window = ts.duration if window is None else window
    chan = {p: k for k, p in enumerate(ts.pairs or channel_pairs(protocol))}
    amps = np.empty(protocol.n_measurements)
    ph = np.empty(protocol.n_measurements)
    per_freq = {}
    for i, tone in enumerate(protocol.injections):
        per_freq[i] = demodulate(ts, tone.frequency, window)
    src = np.zeros(len(protocol.injections)) if phases is None else np.asarray(phases, dtype=float)
    ref = np.empty(protocol.n_measurements)
    for m, (i, pair) in enumerate(protocol.flat()):
        a, p = per_freq[i]
        amps[m], ph[m], ref[m] = a[chan[pair]], p[chan[pair]], src[i]
    return VoltageFrame(amps, ph, window, ts.t0, ref)


# -- SNR --------------------------------------------------------------------------


def compute_snr(frames: Sequence[VoltageFrame], min_frames: int = 10) -> np.ndarray:
    """20 log10(mean / std) of the demodulated amplitudes; +inf for zero variance."""
    if len(frames) < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {len(frames)}")
    a = np.stack([f.amplitudes for f in frames])
    mean = a.mean(axis=0)
    # identical amplitudes can still give a rounding-level std, so test spread directly
    varies = np.ptp(a, axis=0) > 0
    std = np.where(varies, a.std(axis=0, ddof=1), 1.0) if len(a) > 1 else np.ones_like(mean)
    with np.errstate(divide="ignore"):
        return np.where(varies, 20 * np.log10(np.abs(mean) / std), np.inf)


def calibrate_noise_std(
    target_snr_db: float,
    amplitude: float,
    frequency: float = 2000.0,
    fs: float = DEFAULT_FS,
    window: float = DEFAULT_WINDOW,
    n_frames: int = 2000,
    seed: int = 12345,
) -> float:
    """Monte-Carlo calibration of an additive noise std to hit ``target_snr_db``.

    Demodulates ``n_frames`` noisy unit-variance realisations of a tone, measures
    the amplitude scatter per unit noise std and inverts for the std.
    """
    rng = np.random.default_rng(seed)
    n = int(round(window * fs))
    t = np.arange(n) / fs
    clean = amplitude * np.sin(2 * np.pi * frequency * t)
    probe = 1e-3 * amplitude
    x = clean[None, :] + probe * rng.standard_normal((n_frames, n))
    ref = np.exp(-2j * np.pi * frequency * t)
    est = 2 * np.abs(x @ ref) / n
    per_unit = est.std(ddof=1) / probe
    return float(amplitude * 10 ** (-target_snr_db / 20) / per_unit)


def analytic_noise_std(target_snr_db: float, amplitude: float, fs: float = DEFAULT_FS, window: float = DEFAULT_WINDOW) -> float:
    """Closed-form counterpart: amplitude std = noise std * sqrt(2 / N)."""
    n = window * fs
    return amplitude * 10 ** (-target_snr_db / 20) / math.sqrt(2 / n)


def acquire_frames(
    protocol: Protocol,
    amplitudes: Sequence[float],
    n_frames: int,
    noise: NoiseModel | None = None,
    fs: float = DEFAULT_FS,
    window: float = DEFAULT_WINDOW,
    rng: np.random.Generator | None = None,
) -> list[VoltageFrame]:
    """Synthesise and demodulate consecutive frames of a static scene."""
    noise = noise or NOISELESS
    rng = rng if rng is not None else noise.rng()
    frames = []
    for k in range(n_frames):
        ts = synthesize_frame(protocol, amplitudes, fs, window, noise, rng, t0=k * window)
        frames.append(demodulate_frame(ts, protocol, window))
    return frames


# -- files --------------------------------------------------------------------------


def save_timeseries(ts: TimeSeries, path) -> None:
    """``EITTS 1`` text header, then channel-major little-endian float64 samples."""
    header = ["EITTS 1", f"fs {ts.fs!r}", f"channels {ts.n_channels}", f"samples {ts.n_samples}", f"t0 {ts.t0!r}"]
    if ts.pairs:
        header.append("pairs " + " ".join(f"{p}-{n}" for p, n in ts.pairs))
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(ts.samples, dtype="<f8").tobytes())


def load_timeseries(path) -> TimeSeries:
    data = Path(path).read_bytes()
    pos, meta = 0, {}
    while True:
        nl = data.index(b"\n", pos)
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if not meta and line != "EITTS 1" and "magic" not in meta:
            raise ValueError(f"{path}: expected header 'EITTS 1'")
        if line == "EITTS 1":
            meta["magic"] = line
            continue
        if line == "end":
            break
        key, _, value = line.partition(" ")
        meta[key] = value
    ch, ns = int(meta["channels"]), int(meta["samples"])
    body = data[pos:]
    if len(body) != ch * ns * 8:
        raise ValueError(f"{path}: expected {ch * ns * 8} data bytes, found {len(body)}")
    pairs = tuple(tuple(int(v) for v in p.split("-")) for p in meta.get("pairs", "").split()) if "pairs" in meta else ()
    samples = np.frombuffer(body, dtype="<f8").reshape(ch, ns).copy()
    return TimeSeries(float(meta["fs"]), samples, pairs, float(meta.get("t0", 0.0)))


def save_frames_csv(frames: Sequence[VoltageFrame], path, signed: bool = False) -> None:
    n = len(frames[0].amplitudes) if frames else 0
    rows = ["timestamp," + ",".join(f"m{k + 1}" for k in range(n))]
    for f in frames:
        vals = f.signed() if signed else f.amplitudes
        rows.append(f"{f.timestamp!r}," + ",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(rows) + "\n")


def load_frames_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
