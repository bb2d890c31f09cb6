"""
Electron-nuclear spin Hamiltonian of a single dopant site.

Energies are stored as frequencies (E/h, MHz), fields in tesla, all vectors
and matrices in the crystal frame with components ordered (D1, D2, b).
Angular-momentum operators use the standard ladder construction with
m ordered descending (m = S, ..., -S).
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment

import thermal_coupling
from errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

# Bohr and nuclear magneton over Planck constant (CODATA), MHz per tesla
BETA_E = 13996.2449
BETA_N = 7.62259

AXES = {
    'D1': np.array([1.0, 0.0, 0.0]),
    'D2': np.array([0.0, 1.0, 0.0]),
    'b': np.array([0.0, 0.0, 1.0]),
}
DEFAULT_DRIVE_AXIS = 'D2'

HERMITIAN_TOL = 1e-10
UNIT_TOL = 1e-9
DEGENERACY_TOL = 1e-6  # MHz
GAP_TOL = 1e-3  # MHz, minimum zero-field gap for curvature and tracking
TRACKING_OVERLAP = 0.5

_MATRIX_KEYS = {'g_matrix': 'g', 'a_matrix': 'A', 'q_matrix': 'Q'}

Direction = Union[str, Sequence[float], np.ndarray]


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """g, A and Q matrices of one crystallographic site (A, Q in MHz)"""

    g_matrix: np.ndarray
    a_matrix: np.ndarray
    q_matrix: np.ndarray
    g_n: float = -0.1618
    site_label: str = 'site1'
    electron_multiplicity: int = 2
    nuclear_multiplicity: int = 8

    def __post_init__(self):
        for name, key in _MATRIX_KEYS.items():
            try:
                value = np.array(getattr(self, name), dtype=float)
            except (TypeError, ValueError):
                raise ConfigError(f"{self.site_label}.{key} is not a numeric matrix")
            if value.shape != (3, 3):
                raise ConfigError(f"{self.site_label}.{key} must be a 3x3 matrix, got shape {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ConfigError(f"{self.site_label}.{key} has non-finite entries")
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        for name in ('a_matrix', 'q_matrix'):
            matrix = getattr(self, name)
            if np.abs(matrix - matrix.T).max() > 1e-12 * np.abs(matrix).max():
                raise ConfigError(f"{self.site_label}.{_MATRIX_KEYS[name]} is not symmetric")

        if not np.isfinite(self.g_n):
            raise ConfigError(f"{self.site_label}.g_n must be finite")
        if int(self.electron_multiplicity) != self.electron_multiplicity or self.electron_multiplicity < 2:
            raise ConfigError(f"{self.site_label}.electron_multiplicity must be an integer >= 2")
        if int(self.nuclear_multiplicity) != self.nuclear_multiplicity or self.nuclear_multiplicity < 1:
            raise ConfigError(f"{self.site_label}.nuclear_multiplicity must be an integer >= 1")
        object.__setattr__(self, 'electron_multiplicity', int(self.electron_multiplicity))
        object.__setattr__(self, 'nuclear_multiplicity', int(self.nuclear_multiplicity))

    @property
    def dimension(self) -> int:
        return self.electron_multiplicity * self.nuclear_multiplicity


@dataclass(frozen=True, eq=False)
class FieldVector:
    """Static magnetic field in tesla along (D1, D2, b)"""

    components: np.ndarray

    def __post_init__(self):
        try:
            value = np.array(self.components, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("field must be a numeric 3-vector")
        if value.shape != (3,):
            raise ConfigError(f"field must be a 3-vector, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ConfigError("field has non-finite components")
        value.setflags(write=False)
        object.__setattr__(self, 'components', value)

    @classmethod
    def zero(cls) -> 'FieldVector':
        return cls(np.zeros(3))

    @classmethod
    def along(cls, direction: Direction, magnitude: float) -> 'FieldVector':
        return cls(unit_vector(direction) * magnitude)


@dataclass(frozen=True, eq=False)
class EnergyLevels:
    """Eigenvalues (MHz, ascending) and eigenvectors (columns)"""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def count(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Transition:
    lower_index: int
    upper_index: int
    frequency: float  # MHz
    dipole_element: float  # MHz per tesla
    population_difference: float
    weighted_strength: float  # MHz per tesla
    site_label: str = ''


class OperatorBasis(NamedTuple):
    spin: np.ndarray  # (3, d, d) electron operators S_k
    nuclear: np.ndarray  # (3, d, d) nuclear operators I_k
    hyperfine: np.ndarray  # (3, 3, d, d) products S_j I_k
    quadrupole: np.ndarray  # (3, 3, d, d) products I_j I_k


def unit_vector(direction: Direction) -> np.ndarray:
    """Resolve a named crystal axis or a 3-vector into a unit vector"""
    if isinstance(direction, str):
        for name, axis in AXES.items():
            if direction.lower() == name.lower():
                return axis.copy()
        raise ConfigError(f"unknown axis '{direction}', expected one of {', '.join(AXES)}")
    vector = np.asarray(direction, dtype=float)
    if vector.shape != (3,) or not np.all(np.isfinite(vector)):
        raise ConfigError("direction must be a finite 3-vector")
    if abs(np.linalg.norm(vector) - 1.0) > UNIT_TOL:
        raise ConfigError(f"direction {vector.tolist()} is not a unit vector")
    return vector


def field_along(direction: Direction, magnitude: float) -> FieldVector:
    return FieldVector.along(direction, magnitude)


@lru_cache(maxsize=None)
def spin_matrices(multiplicity: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Jx, Jy, Jz) for angular momentum j = (multiplicity - 1) / 2"""
    j = (multiplicity - 1) / 2
    m = j - np.arange(multiplicity)
    raising = np.diag(np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    lowering = raising.conj().T
    jx = (raising + lowering) / 2
    jy = (raising - lowering) / 2j
    jz = np.diag(m).astype(complex)
    for matrix in (jx, jy, jz):
        matrix.setflags(write=False)
    return jx, jy, jz


@lru_cache(maxsize=None)
def operator_basis(electron_multiplicity: int, nuclear_multiplicity: int) -> OperatorBasis:
    electron_identity = np.eye(electron_multiplicity)
    nuclear_identity = np.eye(nuclear_multiplicity)
    spin = np.array([np.kron(s, nuclear_identity) for s in spin_matrices(electron_multiplicity)])
    nuclear = np.array([np.kron(electron_identity, i) for i in spin_matrices(nuclear_multiplicity)])
    hyperfine = np.einsum('jab,kbc->jkac', spin, nuclear)
    quadrupole = np.einsum('jab,kbc->jkac', nuclear, nuclear)
    for array in (spin, nuclear, hyperfine, quadrupole):
        array.setflags(write=False)
    return OperatorBasis(spin, nuclear, hyperfine, quadrupole)


def zero_field_hamiltonian(system: SpinSystem) -> np.ndarray:
    """S.A.I + I.Q.I in MHz"""
    basis = operator_basis(system.electron_multiplicity, system.nuclear_multiplicity)
    h = np.tensordot(system.a_matrix, basis.hyperfine, axes=2)
    h = h + np.tensordot(system.q_matrix, basis.quadrupole, axes=2)
    return (h + h.conj().T) / 2


def zeeman_operators(system: SpinSystem) -> np.ndarray:
    """dH/dB_k for k = D1, D2, b as a (3, d, d) array in MHz per tesla"""
    basis = operator_basis(system.electron_multiplicity, system.nuclear_multiplicity)
    electron = BETA_E * np.tensordot(system.g_matrix, basis.spin, axes=([1], [0]))
    nuclear = BETA_N * system.g_n * basis.nuclear
    return electron - nuclear


def build_hamiltonian(system: SpinSystem, field: Union[FieldVector, Sequence[float]]) -> np.ndarray:
    """
    Spin Hamiltonian H/h in MHz for a static field in tesla.

    H/h = (beta_e/h) B.g.S + S.A.I + I.Q.I - (beta_n/h) g_n B.I
    """
    if not isinstance(field, FieldVector):
        field = FieldVector(field)
    h = zero_field_hamiltonian(system) + np.tensordot(field.components, zeeman_operators(system), axes=1)
    return (h + h.conj().T) / 2


def magnetic_moment_operator(system: SpinSystem, direction: Direction) -> np.ndarray:
    """Derivative of the Hamiltonian with respect to field magnitude along direction"""
    n = unit_vector(direction)
    moment = np.tensordot(n, zeeman_operators(system), axes=1)
    return (moment + moment.conj().T) / 2


def eigensystem(hamiltonian: np.ndarray) -> EnergyLevels:
    """
    Diagonalize a Hermitian matrix.

    Values come out ascending; each eigenvector is rephased so that its first
    non-negligible component is real and positive.
    """
    h = np.asarray(hamiltonian, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ConfigError(f"Hamiltonian must be square, got shape {h.shape}")
    scale = max(np.abs(h).max(), 1.0)
    if np.abs(h - h.conj().T).max() > HERMITIAN_TOL * scale:
        raise ConfigError("Hamiltonian is not Hermitian")

    values, vectors = eigh(h)
    first = np.argmax(np.abs(vectors) > 1e-8, axis=0)
    pivots = vectors[first, np.arange(vectors.shape[1])]
    vectors = vectors * (np.abs(pivots) / pivots)
    values.setflags(write=False)
    vectors.setflags(write=False)
    return EnergyLevels(values, vectors)


def zero_field_levels(system: SpinSystem) -> EnergyLevels:
    return eigensystem(zero_field_hamiltonian(system))


def level_pairs(count: int) -> Tuple[np.ndarray, np.ndarray]:
    """All (lower, upper) index pairs, lower < upper, in lexicographic order"""
    return np.triu_indices(count, k=1)


def degenerate_clusters(values: np.ndarray, tolerance: float = DEGENERACY_TOL) -> np.ndarray:
    """Label ascending eigenvalues so that near-equal neighbours share a label"""
    steps = np.diff(values) > tolerance
    return np.concatenate([[0], np.cumsum(steps)])


def _transition_strengths(levels: EnergyLevels, moment: np.ndarray) -> np.ndarray:
    """
    |<f|M|i>|^2 for every level pair, averaged over degenerate partners.

    Each pair inside a block of degenerate levels gets the block mean, so the
    value does not depend on the basis chosen in a degenerate subspace and
    the block total is preserved.
    """
    elements = np.abs(levels.vectors.conj().T @ moment @ levels.vectors) ** 2
    labels = degenerate_clusters(levels.values)
    membership = np.zeros((labels[-1] + 1, len(labels)))
    membership[labels, np.arange(len(labels))] = 1.0
    sizes = membership.sum(axis=1)
    block_mean = (membership @ elements @ membership.T) / np.outer(sizes, sizes)
    return block_mean[np.ix_(labels, labels)]


def enumerate_transitions(levels: EnergyLevels, system: SpinSystem,
                          direction: Direction = DEFAULT_DRIVE_AXIS,
                          temperature: float = 5.1,
                          f_window: Optional[Tuple[float, float]] = None) -> List[Transition]:
    """
    Every level pair as a Transition, sorted by frequency.

    Args:
        levels: diagonalization of the system's Hamiltonian
        system: spin system the levels belong to (drive coupling)
        direction: microwave drive direction, named axis or unit vector
        temperature: kelvin, sets Boltzmann populations over all levels
        f_window: optional inclusive (low, high) frequency window in MHz
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    strengths = _transition_strengths(levels, magnetic_moment_operator(system, direction))
    populations = thermal_coupling.boltzmann_populations(levels, temperature)

    lower, upper = level_pairs(levels.count)
    frequencies = levels.values[upper] - levels.values[lower]
    dipoles = np.sqrt(strengths[upper, lower])
    differences = populations[lower] - populations[upper]
    weighted = dipoles * np.sqrt(np.abs(differences))

    keep = np.ones(len(lower), dtype=bool)
    if f_window is not None:
        low, high = f_window
        keep = (frequencies >= low) & (frequencies <= high)
    order = [k for k in np.lexsort((upper, lower, frequencies)) if keep[k]]

    return [
        Transition(
            lower_index=int(lower[k]),
            upper_index=int(upper[k]),
            frequency=float(frequencies[k]),
            dipole_element=float(dipoles[k]),
            population_difference=float(differences[k]),
            weighted_strength=float(weighted[k]),
            site_label=system.site_label,
        )
        for k in order
    ]


@dataclass(frozen=True, eq=False)
class ZeemanScan:
    fields: np.ndarray  # tesla
    energies: np.ndarray  # MHz, (points, levels); columns follow tracked levels
    tracking_ok: np.ndarray  # per segment between adjacent field points

    def transition_frequency(self, lower: int, upper: int) -> np.ndarray:
        return np.abs(self.energies[:, upper] - self.energies[:, lower])

    @property
    def transition_frequencies(self) -> np.ndarray:
        """(points, pairs) array, pairs in level_pairs order of the first point"""
        lower, upper = level_pairs(self.energies.shape[1])
        return np.abs(self.energies[:, upper] - self.energies[:, lower])


def zeeman_scan(system: SpinSystem, direction: Direction, fields: Sequence[float]) -> ZeemanScan:
    """
    Levels versus field magnitude along direction.

    Levels are tracked between adjacent field points by maximum eigenvector
    overlap; a segment whose best overlap falls below 0.5 is flagged.
    """
    magnitudes = np.asarray(fields, dtype=float)
    if magnitudes.ndim != 1 or not np.all(np.isfinite(magnitudes)):
        raise ConfigError("scan fields must be a finite 1-D list")
    moment = magnetic_moment_operator(system, direction)
    stack = zero_field_hamiltonian(system)[None] + magnitudes[:, None, None] * moment[None]
    values, vectors = np.linalg.eigh(stack)

    energies = np.empty_like(values)
    tracking_ok = np.ones(max(len(magnitudes) - 1, 0), dtype=bool)
    previous = None
    for k in range(len(magnitudes)):
        current_values, current_vectors = values[k], vectors[k]
        if previous is not None:
            overlap = np.abs(previous.conj().T @ current_vectors) ** 2
            rows, cols = linear_sum_assignment(-overlap)
            current_values = current_values[cols]
            current_vectors = current_vectors[:, cols]
            if overlap[rows, cols].min() < TRACKING_OVERLAP:
                tracking_ok[k - 1] = False
        energies[k] = current_values
        previous = current_vectors

    if not tracking_ok.all():
        logger.warning("Zeeman scan of %s: level tracking unreliable on %d of %d segments, "
                       "use a finer field step", system.site_label,
                       int((~tracking_ok).sum()), len(tracking_ok))
    return ZeemanScan(magnitudes, energies, tracking_ok)


def adaptive_curvature(func: Callable[[float], float], step: float = 1e-4,
                       rtol: float = 0.01, atol: float = 1e-3, max_halvings: int = 20) -> float:
    """
    Second central difference of func at 0, halving the step until two
    successive estimates agree to rtol.
    """
    centre = func(0.0)

    def second_difference(h):
        return (func(h) - 2 * centre + func(-h)) / h ** 2

    estimate = second_difference(step)
    for _ in range(max_halvings):
        step /= 2
        refined = second_difference(step)
        if abs(refined - estimate) <= rtol * abs(refined) + atol:
            return refined
        estimate = refined
    logger.warning("curvature estimate did not settle to %.1f%% after %d halvings",
                   100 * rtol, max_halvings)
    return estimate


def transition_curvature(system: SpinSystem, direction: Direction, pair: Tuple[int, int],
                         step: float = 1e-4) -> float:
    """d^2 f / dB^2 at zero field in MHz per tesla^2 for the (lower, upper) level pair"""
    lower, upper = pair
    zero = zero_field_levels(system)
    for index in (lower, upper):
        if not 0 <= index < zero.count:
            raise ConfigError(f"level index {index} out of range")
        gaps = np.abs(zero.values - zero.values[index])
        gaps[index] = np.inf
        if gaps.min() < GAP_TOL:
            raise NumericalError(
                f"level {index} of {system.site_label} is degenerate at zero field within "
                f"{GAP_TOL} MHz; curvature is undefined without degenerate perturbation handling")

    h0 = zero_field_hamiltonian(system)
    moment = magnetic_moment_operator(system, direction)
    reference = zero.vectors[:, [lower, upper]]

    def frequency(b):
        if b == 0.0:
            return zero.values[upper] - zero.values[lower]
        values, vectors = np.linalg.eigh(h0 + b * moment)
        i, j = (np.abs(reference.conj().T @ vectors) ** 2).argmax(axis=1)
        return values[j] - values[i]

    return adaptive_curvature(frequency, step)


def rotate_system(system: SpinSystem, rotation: np.ndarray, site_label: Optional[str] = None) -> SpinSystem:
    """Express g, A and Q in a frame rotated by the proper rotation matrix"""
    r = np.asarray(rotation, dtype=float)
    if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
        raise ConfigError("rotation must be a proper 3x3 rotation matrix")
    a = r @ system.a_matrix @ r.T
    q = r @ system.q_matrix @ r.T
    return replace(
        system,
        g_matrix=r @ system.g_matrix @ r.T,
        a_matrix=(a + a.T) / 2,
        q_matrix=(q + q.T) / 2,
        site_label=system.site_label if site_label is None else site_label,
    )


def magnetic_subclasses(system: SpinSystem) -> Tuple[SpinSystem, SpinSystem]:
    """The two magnetically inequivalent subclasses related by C2 about b"""
    c2 = np.diag([-1.0, -1.0, 1.0])
    return (replace(system, site_label=f"{system.site_label}a"),
            rotate_system(system, c2, site_label=f"{system.site_label}b"))
