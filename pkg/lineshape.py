"""
Inhomogeneous line profiles from random local magnetic fields.

Field vectors are drawn from a Gaussian distribution and mapped through the
field dependence of a transition frequency; the histogram of the mapped
frequencies on a caller-supplied uniform grid is the line profile.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import find_peaks
from scipy.stats import chi2

import spin_model
from errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-6
OUTSIDE_MASS_TOL = 1e-3
SAMPLE_BLOCK = 100_000  # samples per derived seed, independent of thread count
EIGEN_CHUNK = 4096
METHODS = ('exact', 'quadratic')

FieldMapping = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FieldDistribution:
    """Gaussian local field, sigma_b per axis in tesla"""

    sigma_b: float
    dimensionality: int = 1
    axis: spin_model.Direction = 'b'

    def __post_init__(self):
        if not math.isfinite(self.sigma_b) or self.sigma_b < 0:
            raise ConfigError("lineshape.sigma_b_tesla must be finite and non-negative")
        if self.dimensionality not in (1, 3):
            raise ConfigError("lineshape.dimensionality must be 1 or 3")
        object.__setattr__(self, 'axis', spin_model.unit_vector(self.axis))

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """(count, 3) field vectors"""
        if self.dimensionality == 1:
            return (self.sigma_b * rng.standard_normal(count))[:, None] * self.axis[None, :]
        return self.sigma_b * rng.standard_normal((count, 3))


@dataclass(frozen=True, eq=False)
class LineProfile:
    frequencies: np.ndarray  # MHz, uniform ascending grid
    density: np.ndarray  # per MHz

    def __post_init__(self):
        frequencies = np.asarray(self.frequencies, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if frequencies.ndim != 1 or frequencies.shape != density.shape or len(frequencies) < 2:
            raise DataError("profile needs matching 1-D frequency and density columns of length >= 2")
        if np.any(np.diff(frequencies) <= 0):
            raise DataError("profile frequencies must be strictly ascending")
        if not np.all(np.isfinite(density)) or np.any(density < 0):
            raise DataError("profile density must be finite and non-negative")
        area = trapezoid(density, frequencies)
        if abs(area - 1.0) > NORMALIZATION_TOL:
            raise DataError(f"profile integrates to {area:.9f}, expected 1")
        object.__setattr__(self, 'frequencies', frequencies)
        object.__setattr__(self, 'density', density)

    @classmethod
    def normalized(cls, frequencies, weights) -> 'LineProfile':
        frequencies = np.asarray(frequencies, dtype=float)
        weights = np.asarray(weights, dtype=float)
        area = trapezoid(weights, frequencies)
        if not area > 0:
            raise DataError("profile has no weight on its grid")
        return cls(frequencies, weights / area)

    @property
    def step(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    def mirrored(self, about: float = 0.0) -> 'LineProfile':
        """Profile reflected through the frequency `about`"""
        return LineProfile(2 * about - self.frequencies[::-1], self.density[::-1])


@dataclass(frozen=True, eq=False)
class ToyCrossing:
    """Two-level avoided crossing f(B) = sqrt(gap^2 + (slope B.axis)^2)"""

    gap_delta: float  # MHz
    slope_mu: float  # MHz per tesla
    axis: spin_model.Direction = 'b'

    def __post_init__(self):
        if not self.gap_delta > 0:
            raise ConfigError("toy.gap_mhz must be positive")
        object.__setattr__(self, 'axis', spin_model.unit_vector(self.axis))

    def frequency(self, fields: np.ndarray) -> np.ndarray:
        projected = fields @ self.axis
        return np.sqrt(self.gap_delta ** 2 + (self.slope_mu * projected) ** 2)

    @property
    def curvature(self) -> float:
        return self.slope_mu ** 2 / self.gap_delta


def _uniform_grid(grid) -> Tuple[np.ndarray, float]:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2:
        raise ConfigError("lineshape grid needs at least two points")
    steps = np.diff(grid)
    if steps[0] <= 0 or not np.allclose(steps, steps[0], rtol=1e-6, atol=0):
        raise ConfigError("lineshape grid must be uniform and ascending")
    return grid, float(steps[0])


def sample_profile(mapping: FieldMapping, dist: FieldDistribution, grid, samples: int, seed: int,
                   threads: int = 1) -> LineProfile:
    """
    Histogram of mapping(B) for B drawn from dist, on bins centred on grid.

    Samples are drawn in fixed-size blocks, each from its own child of
    SeedSequence(seed), so the result does not depend on the thread count.
    """
    grid, step = _uniform_grid(grid)
    if samples < 1:
        raise ConfigError("lineshape.samples must be positive")
    edges = np.append(grid - step / 2, grid[-1] + step / 2)

    sizes = [SAMPLE_BLOCK] * (samples // SAMPLE_BLOCK)
    if samples % SAMPLE_BLOCK:
        sizes.append(samples % SAMPLE_BLOCK)
    children = np.random.SeedSequence(seed).spawn(len(sizes))

    def run_block(job):
        size, child = job
        frequencies = mapping(dist.draw(np.random.default_rng(child), size))
        counts, _ = np.histogram(frequencies, bins=edges)
        return counts

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        blocks = list(pool.map(run_block, zip(sizes, children)))
    counts = np.sum(blocks, axis=0)

    outside = samples - int(counts.sum())
    if outside > OUTSIDE_MASS_TOL * samples:
        raise DataError(f"{100 * outside / samples:.2f}% of the probability mass falls outside the grid "
                        f"{grid[0]:g}-{grid[-1]:g} MHz")
    logger.debug("sampled %d fields in %d blocks, %d outside the grid", samples, len(sizes), outside)
    return LineProfile.normalized(grid, counts.astype(float))


def _exact_mapping(system: spin_model.SpinSystem, pair: Tuple[int, int]) -> FieldMapping:
    h0 = spin_model.zero_field_hamiltonian(system)
    operators = spin_model.zeeman_operators(system)
    reference = spin_model.zero_field_levels(system).vectors[:, list(pair)]

    def mapping(fields):
        result = np.empty(len(fields))
        for start in range(0, len(fields), EIGEN_CHUNK):
            block = fields[start:start + EIGEN_CHUNK]
            stack = h0[None] + np.tensordot(block, operators, axes=1)
            values, vectors = np.linalg.eigh(stack)
            overlap = np.abs(np.einsum('ia,nib->nab', reference.conj(), vectors)) ** 2
            tracked = overlap.argmax(axis=2)
            rows = np.arange(len(block))
            result[start:start + EIGEN_CHUNK] = np.abs(values[rows, tracked[:, 1]] - values[rows, tracked[:, 0]])
        return result

    return mapping


def _quadratic_mapping(system: spin_model.SpinSystem, pair: Tuple[int, int],
                       dist: FieldDistribution) -> FieldMapping:
    zero = spin_model.zero_field_levels(system)
    f0 = zero.values[pair[1]] - zero.values[pair[0]]
    try:
        if dist.dimensionality == 1:
            curvature = spin_model.transition_curvature(system, dist.axis, pair)
            return lambda fields: f0 + 0.5 * curvature * (fields @ dist.axis) ** 2
        # per-axis curvatures; cross terms are neglected
        curvatures = np.array([spin_model.transition_curvature(system, axis, pair)
                               for axis in spin_model.AXES])
    except NumericalError as exc:
        raise NumericalError(f"{exc}; use method 'exact' for this transition")
    return lambda fields: f0 + 0.5 * (fields ** 2) @ curvatures


def synthesize_profile(system: spin_model.SpinSystem, pair: Tuple[int, int], dist: FieldDistribution,
                       grid, method: str = 'exact', samples: int = 1_000_000, seed: int = 0,
                       threads: int = 1) -> LineProfile:
    """
    Line profile of one transition of a spin system under random fields.

    Args:
        pair: (lower, upper) zero-field level indices
        method: 'exact' diagonalizes per sample and tracks both levels by
            overlap with their zero-field eigenvectors; 'quadratic' uses
            f0 + c B^2 / 2 with c from transition_curvature
    """
    lower, upper = pair
    if not 0 <= lower < upper < system.dimension:
        raise ConfigError(f"level pair {tuple(pair)} is not a valid (lower, upper) pair")
    if method == 'exact':
        mapping = _exact_mapping(system, (lower, upper))
    elif method == 'quadratic':
        mapping = _quadratic_mapping(system, (lower, upper), dist)
    else:
        raise ConfigError(f"lineshape.method must be one of {', '.join(METHODS)}, got '{method}'")
    return sample_profile(mapping, dist, grid, samples, seed, threads)


def toy_profile(toy: ToyCrossing, dist: FieldDistribution, grid, samples: int = 1_000_000,
                seed: int = 0, threads: int = 1) -> LineProfile:
    return sample_profile(toy.frequency, dist, grid, samples, seed, threads)


def quadratic_edge_density(frequencies, f0: float, curvature: float, sigma_b: float,
                           bin_averaged: bool = False) -> np.ndarray:
    """
    Closed-form density of f = f0 + c B^2 / 2 for one Gaussian field axis.

    (f - f0) / (c sigma^2 / 2) is chi-square distributed with one degree of
    freedom. With bin_averaged the density is averaged over bins of the
    (uniform) frequency grid, which is what a histogram estimates.
    """
    frequencies = np.asarray(frequencies, dtype=float)
    scale = curvature * sigma_b ** 2 / 2
    if scale == 0:
        raise ConfigError("edge density needs non-zero curvature and field spread")
    if not bin_averaged:
        reduced = (frequencies - f0) / scale
        inside = reduced > 0
        density = np.zeros_like(frequencies)
        density[inside] = chi2.pdf(reduced[inside], 1) / abs(scale)
        return density

    _, step = _uniform_grid(frequencies)
    low = np.clip((frequencies - step / 2 - f0) / scale, 0, None)
    high = np.clip((frequencies + step / 2 - f0) / scale, 0, None)
    return np.abs(chi2.cdf(high, 1) - chi2.cdf(low, 1)) / step


def _mode_index(profile: LineProfile) -> int:
    return int(np.argmax(profile.density))


def effective_linewidth(profile: LineProfile) -> float:
    """
    FWHM from linear interpolation of the half-maximum crossings.

    A side that drops from the mode straight to zero crosses at the bin
    boundary, so a sharp edge counts as the lower (or upper) crossing.
    """
    f, density = profile.frequencies, profile.density
    mode = _mode_index(profile)
    half = density[mode] / 2

    below_left = np.nonzero(density[:mode] < half)[0]
    below_right = np.nonzero(density[mode + 1:] < half)[0]
    if len(below_left) == 0 or len(below_right) == 0:
        raise DataError("profile does not fall below half maximum on both sides within the grid")
    i = below_left[-1]
    low = f[i] + (half - density[i]) * (f[i + 1] - f[i]) / (density[i + 1] - density[i])
    j = mode + 1 + below_right[0]
    high = f[j - 1] + (half - density[j - 1]) * (f[j] - f[j - 1]) / (density[j] - density[j - 1])
    return float(high - low)


def asymmetry_index(profile: LineProfile) -> float:
    """
    Largest density slope below the mode over the largest slope above it.

    Values above 1 mark a sharp lower edge, below 1 a sharp upper edge.
    """
    density = profile.density
    mode = _mode_index(profile)
    if mode == 0 or mode == len(density) - 1:
        raise DataError("profile mode lies on the grid boundary")
    rising = np.abs(np.diff(density[:mode + 1])).max()
    falling = np.abs(np.diff(density[mode:])).max()
    if falling == 0:
        return math.inf
    return float(rising / falling)


def compose_doublet(p1: LineProfile, p2: LineProfile, w1: float, w2: float) -> LineProfile:
    if len(p1.frequencies) != len(p2.frequencies) or not np.allclose(
            p1.frequencies, p2.frequencies, rtol=0, atol=1e-9 * p1.step):
        raise ConfigError("doublet components must share one frequency grid")
    if w1 < 0 or w2 < 0 or w1 + w2 <= 0:
        raise ConfigError("doublet weights must be non-negative with a positive sum")
    if w2 == 0:
        return p1
    if w1 == 0:
        return LineProfile(p1.frequencies, p2.density)
    return LineProfile(p1.frequencies, (w1 * p1.density + w2 * p2.density) / (w1 + w2))


def count_modes(profile: LineProfile, prominence: float = 0.1) -> int:
    """Number of local maxima whose prominence exceeds a fraction of the global maximum"""
    padded = np.concatenate([[0.0], profile.density, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence * profile.density.max())
    return len(peaks)


def profile_summary(profile: LineProfile) -> dict:
    """Mode frequency, FWHM and asymmetry of a profile, for reports"""
    mode = _mode_index(profile)
    asymmetry = asymmetry_index(profile)
    return {
        'mode_mhz': float(profile.frequencies[mode]),
        'fwhm_mhz': effective_linewidth(profile),
        'asymmetry_index': asymmetry if math.isfinite(asymmetry) else None,
        'modes': count_modes(profile),
    }
