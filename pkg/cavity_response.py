"""
Cavity transmission with an absorbing spin ensemble.

Input-output model of a two-port cavity whose mode couples to ensemble
lines treated as damped harmonic oscillators:

    S21(w) = kappa_ext / (i (w_c - w) + kappa / 2 + sum_k W_k(w))

All frequencies, widths and couplings are in MHz. A line's collective
coupling G = sqrt(N) g/2pi enters W_k as (G/2)^2, which makes the
on-resonance suppression (1 + C)^-2 with C = G^2 / (kappa Gamma*).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import brentq

from errors import ConfigError, DataError, NumericalError
from lineshape import LineProfile
from thermal_coupling import CavityMode, cooperativity, dbm_to_watts, photon_number

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-6
HOMOGENEOUS_FRACTION = 0.01  # default homogeneous floor as a fraction of Gamma*
KERNEL_CHUNK = 512

DEFAULT_TUNING_RANGE = (1600.0, 4000.0)  # MHz


@dataclass(frozen=True, eq=False)
class EnsembleLine:
    """
    One inhomogeneous spin line.

    Without a profile the line is Lorentzian with FWHM width_gamma_star
    around center; with a profile the density (absolute frequencies) replaces
    it and center is kept for reporting only.
    """

    center: float
    width_gamma_star: float
    coupling: float
    profile: Optional[LineProfile] = None
    homogeneous_width: Optional[float] = None

    def __post_init__(self):
        if self.width_gamma_star <= 0:
            raise ConfigError("line width must be positive")
        if self.coupling < 0:
            raise ConfigError("line coupling must be non-negative")
        if self.profile is not None:
            area = trapezoid(self.profile.density, self.profile.frequencies)
            if abs(area - 1.0) > NORMALIZATION_TOL:
                raise DataError(f"line density integrates to {area:.9f}, expected 1")
        if self.homogeneous_width is None:
            object.__setattr__(self, 'homogeneous_width', HOMOGENEOUS_FRACTION * self.width_gamma_star)
        if self.homogeneous_width <= 0:
            raise ConfigError("homogeneous width must be positive")

    @property
    def shape(self) -> str:
        return 'lorentzian' if self.profile is None else 'custom'

    def scaled(self, factor: float) -> 'EnsembleLine':
        return replace(self, coupling=self.coupling * factor)

    def _sort_key(self):
        return (self.center, self.width_gamma_star, self.coupling, self.shape)


@dataclass(frozen=True, eq=False)
class SweepResult:
    frequencies: np.ndarray  # MHz
    s21_squared: np.ndarray  # linear power units
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        frequencies = np.asarray(self.frequencies, dtype=float)
        values = np.asarray(self.s21_squared, dtype=float)
        if frequencies.shape != values.shape or frequencies.ndim != 1:
            raise DataError("sweep frequencies and values must be 1-D and of equal length")
        if np.any(values < 0):
            raise DataError("sweep contains negative |S21|^2 values")
        object.__setattr__(self, 'frequencies', frequencies)
        object.__setattr__(self, 's21_squared', values)


class PeakResult(NamedTuple):
    peak_frequency: float
    peak_value: float
    quality_factor: float
    fwhm: float


class SaturationPoint(NamedTuple):
    power_dbm: float
    photon_number: float
    peak_value: float
    quality_factor: float


@dataclass(frozen=True)
class TuningCalibration:
    """Local linearization of cavity frequency versus gap size"""

    slope: float  # MHz per mm
    reference_gap: float  # mm
    reference_frequency: float  # MHz
    tuning_range: Tuple[float, float] = DEFAULT_TUNING_RANGE

    def __post_init__(self):
        if not math.isfinite(self.slope) or self.slope <= 0:
            raise ConfigError("tuning.slope must be finite and positive")

    @classmethod
    def from_step(cls, step_nm: float, shift_mhz: float, reference_gap: float,
                  reference_frequency: float, **kwargs) -> 'TuningCalibration':
        """Calibration from one actuator step and the frequency shift it causes"""
        if step_nm <= 0:
            raise ConfigError("tuning.step_nm must be positive")
        return cls(slope=shift_mhz / (step_nm * 1e-6), reference_gap=reference_gap,
                   reference_frequency=reference_frequency, **kwargs)


def self_energy(line: EnsembleLine, omega: np.ndarray) -> np.ndarray:
    """W(w) of one line on the frequency grid omega"""
    rate = (line.coupling / 2) ** 2
    if line.profile is None:
        return rate / (1j * (line.center - omega) + line.width_gamma_star / 2)

    nu = line.profile.frequencies
    density = line.profile.density
    result = np.empty(len(omega), dtype=complex)
    for start in range(0, len(omega), KERNEL_CHUNK):
        block = omega[start:start + KERNEL_CHUNK]
        kernel = density[None, :] / (1j * (nu[None, :] - block[:, None]) + line.homogeneous_width / 2)
        result[start:start + KERNEL_CHUNK] = rate * trapezoid(kernel, nu, axis=1)
    return result


def transmission(grid: Sequence[float], mode: CavityMode, lines: Iterable[EnsembleLine] = (),
                 metadata: Optional[dict] = None) -> SweepResult:
    """|S21|^2 on an ascending frequency grid"""
    omega = np.asarray(grid, dtype=float)
    if omega.ndim != 1 or len(omega) == 0:
        raise ConfigError("frequency grid must be a non-empty 1-D list")
    if np.any(np.diff(omega) < 0):
        raise ConfigError("frequency grid must be sorted ascending")

    denominator = 1j * (mode.frequency - omega) + mode.linewidth_kappa / 2
    for line in sorted(lines, key=EnsembleLine._sort_key):
        denominator = denominator + self_energy(line, omega)
    s21 = mode.kappa_ext / denominator
    return SweepResult(omega, np.abs(s21) ** 2, dict(metadata or {}))


def resonance_grid(mode: CavityMode, span_linewidths: float = 20.0, points_per_linewidth: int = 20,
                   broadening: float = 1.0) -> np.ndarray:
    """Uniform grid centred on the cavity, step kappa / points_per_linewidth"""
    step = mode.linewidth_kappa / points_per_linewidth
    count = int(math.ceil(span_linewidths * broadening * points_per_linewidth))
    return mode.frequency + step * np.arange(-count, count + 1)


def extract_peak(sweep: SweepResult) -> PeakResult:
    """
    Resonance frequency, peak value and loaded Q of a transmission sweep.

    The maximum is refined by a parabola through the three points around the
    discrete maximum; the FWHM comes from linear interpolation at half
    maximum on each side.
    """
    f, y = sweep.frequencies, sweep.s21_squared
    if len(f) < 3:
        raise DataError("sweep needs at least three points")
    k = int(np.argmax(y))
    if k == 0 or k == len(y) - 1:
        raise DataError("peak not bracketed by the sweep")

    peak_frequency, peak_value = f[k], y[k]
    h1, h2 = f[k] - f[k - 1], f[k + 1] - f[k]
    left_slope = (y[k] - y[k - 1]) / h1
    right_slope = (y[k + 1] - y[k]) / h2
    a = (right_slope - left_slope) / (h1 + h2)
    if a < 0:
        b = left_slope + a * h1
        offset = -b / (2 * a)
        if -h1 <= offset <= h2:
            peak_frequency = f[k] + offset
            peak_value = y[k] - b ** 2 / (4 * a)

    half = peak_value / 2
    below_left = np.nonzero(y[:k] < half)[0]
    below_right = np.nonzero(y[k + 1:] < half)[0]
    if len(below_left) == 0 or len(below_right) == 0:
        raise DataError("no half-maximum crossing on both sides of the peak")
    i = below_left[-1]
    low = f[i] + (half - y[i]) * (f[i + 1] - f[i]) / (y[i + 1] - y[i])
    j = k + 1 + below_right[0]
    high = f[j - 1] + (half - y[j - 1]) * (f[j] - f[j - 1]) / (y[j] - y[j - 1])

    fwhm = high - low
    return PeakResult(float(peak_frequency), float(peak_value), float(peak_frequency / fwhm), float(fwhm))


def cavity_pulling(mode: CavityMode, lines: Iterable[EnsembleLine]) -> float:
    """Dispersive shift of the cavity resonance in MHz (positive: pushed upward)"""
    omega = np.array([mode.frequency])
    return float(sum(self_energy(line, omega)[0].imag for line in sorted(lines, key=EnsembleLine._sort_key)))


def _uniform_step(frequencies: np.ndarray) -> float:
    steps = np.diff(frequencies)
    if len(steps) == 0 or not np.allclose(steps, steps[0], rtol=1e-6, atol=0):
        raise DataError("sweep grid must be uniform")
    return float(steps[0])


def vibration_average(sweep: SweepResult, sigma_f: float) -> SweepResult:
    """
    Average of copies of the curve shifted by Gaussian-distributed cavity
    frequency jitter of standard deviation sigma_f (MHz).
    """
    if sigma_f < 0:
        raise ConfigError("jitter sigma must be non-negative")
    if sigma_f == 0:
        return sweep
    step = _uniform_step(sweep.frequencies)
    smoothed = gaussian_filter1d(sweep.s21_squared, sigma_f / step, mode='nearest', truncate=6.0)
    metadata = dict(sweep.metadata, jitter_sigma_mhz=sigma_f)
    return SweepResult(sweep.frequencies, smoothed, metadata)


def vibration_sigma_for_q(mode: CavityMode, measured_q: float) -> float:
    """Jitter sigma (MHz) that broadens the intrinsic cavity line down to measured_q"""
    if measured_q >= mode.quality_factor:
        return 0.0
    measured_width = mode.frequency / measured_q
    grid = mode.frequency + (measured_width / 40) * np.arange(-1600, 1601)
    bare = transmission(grid, mode)

    def excess_q(sigma):
        return extract_peak(vibration_average(bare, sigma)).quality_factor - measured_q

    upper = measured_width / (2 * math.sqrt(2 * math.log(2)))
    try:
        return brentq(excess_q, 0.0, upper, xtol=1e-6 * mode.linewidth_kappa)
    except ValueError as exc:
        raise NumericalError(f"no jitter reproduces Q = {measured_q:g}: {exc}")


def saturation_sweep(powers_dbm: Sequence[float], mode: CavityMode, line: EnsembleLine,
                     saturation_photons: float, grid: Optional[np.ndarray] = None,
                     coupling_correction: float = 1.0, threads: int = 1) -> List[SaturationPoint]:
    """
    Peak transmission and Q versus input power.

    The line's squared coupling is reduced by 1 / (1 + n / n_sat), a
    phenomenological two-level saturation of its population difference.
    """
    if saturation_photons <= 0:
        raise ConfigError("saturation photon number must be positive")
    if grid is None:
        broadening = 1 + cooperativity(line.coupling, mode.linewidth_kappa, line.width_gamma_star)
        grid = resonance_grid(mode, points_per_linewidth=40, broadening=broadening)

    def evaluate(power_dbm):
        photons = photon_number(mode, dbm_to_watts(power_dbm), coupling_correction)
        factor = 1 / math.sqrt(1 + photons / saturation_photons)
        peak = extract_peak(transmission(grid, mode, [line.scaled(factor)]))
        return SaturationPoint(float(power_dbm), photons, peak.peak_value, peak.quality_factor)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(evaluate, powers_dbm))


def saturation_knee(points: Sequence[SaturationPoint]) -> float:
    """Power (dBm) of the largest discrete second derivative of linear peak |S21|^2 over the dBm axis"""
    powers = np.array([p.power_dbm for p in points])
    peaks = np.array([p.peak_value for p in points])
    if len(powers) < 3:
        raise ConfigError("knee detection needs at least three powers")
    step = _uniform_step(powers)
    curvature = np.diff(peaks, 2) / step ** 2
    return float(powers[1 + int(np.argmax(curvature))])


def gap_to_frequency(calibration: TuningCalibration, gap: float) -> float:
    """Cavity frequency (MHz) for a gap size (mm)"""
    frequency = calibration.reference_frequency + calibration.slope * (gap - calibration.reference_gap)
    low, high = calibration.tuning_range
    if not low <= frequency <= high:
        logger.warning("gap %.6f mm maps to %.3f MHz, outside the tuning range %.0f-%.0f MHz",
                       gap, frequency, low, high)
    return frequency


def frequency_to_gap(calibration: TuningCalibration, frequency: float) -> float:
    return calibration.reference_gap + (frequency - calibration.reference_frequency) / calibration.slope


def actuator_frequencies(calibration: TuningCalibration, start_gap: float, steps: int,
                         step_nm: float = 30.0) -> np.ndarray:
    """Cavity frequencies visited by stepping the actuator from start_gap"""
    gaps = start_gap + step_nm * 1e-6 * np.arange(steps)
    return np.array([gap_to_frequency(calibration, gap) for gap in gaps])
