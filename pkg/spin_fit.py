"""
Refinement of hyperfine (A) and quadrupole (Q) matrices against observed
zero-field line centres.

Parameters are offsets in MHz added to the independent entries of the base
systems' A and Q matrices; g and g_n do not enter zero-field frequencies and
are never fitted.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

import spin_model
from cavity_response import PeakResult, SweepResult, extract_peak
from errors import ConfigError

logger = logging.getLogger(__name__)

PARAMETER_NAMES = (
    'A_xx', 'A_yy', 'A_zz', 'A_xy', 'A_xz', 'A_yz',
    'Q_xx', 'Q_yy', 'Q_zz', 'Q_xy', 'Q_xz', 'Q_yz',
)
_ENTRIES = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

MATCHING_MODES = ('assigned', 'nearest')
DEFAULT_BOUND = 50.0  # MHz
DEFAULT_UNCERTAINTY = 1.0  # MHz
MERGE_TOL = 1e-6  # MHz
SIMPLEX_SCALE = 0.05
FATOL = 1e-6  # MHz^2
MAX_ITERATIONS = 2000
TARGET_OBJECTIVE = 1e-6


@dataclass(frozen=True)
class ObservedLine:
    frequency: float  # MHz
    uncertainty: float = DEFAULT_UNCERTAINTY
    site_hint: Optional[str] = None
    assignment: Optional[int] = None  # index into the site's lexicographic level pairs

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigError(f"observed line frequency must be positive, got {self.frequency}")
        if not self.uncertainty > 0:
            raise ConfigError(f"observed line uncertainty must be positive, got {self.uncertainty}")


class PredictedLine(NamedTuple):
    frequency: float
    strength: float
    site: str
    lower_index: int
    upper_index: int


@dataclass(frozen=True, eq=False)
class FitProblem:
    base_systems: Tuple[spin_model.SpinSystem, ...]
    free_mask: np.ndarray  # (systems, 12) booleans in PARAMETER_NAMES order
    observed: Tuple[ObservedLine, ...]
    bounds: Optional[np.ndarray] = None  # (free, 2) offsets in MHz
    matching: str = 'nearest'
    f_window: Optional[Tuple[float, float]] = None
    strength_floor: float = 0.0
    direction: spin_model.Direction = spin_model.DEFAULT_DRIVE_AXIS
    temperature: float = 5.1
    restarts: int = 8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        systems = tuple(self.base_systems)
        if not systems:
            raise ConfigError("fit needs at least one spin system")
        labels = [system.site_label for system in systems]
        if len(set(labels)) != len(labels):
            raise ConfigError("fit systems must have distinct site labels")
        object.__setattr__(self, 'base_systems', systems)
        object.__setattr__(self, 'observed', tuple(self.observed))

        mask = np.array(self.free_mask, dtype=bool).reshape(len(systems), -1)
        if mask.shape[1] != len(PARAMETER_NAMES):
            raise ConfigError(f"free mask needs {len(PARAMETER_NAMES)} entries per system")
        object.__setattr__(self, 'free_mask', mask)

        free = int(mask.sum())
        if self.bounds is None:
            bounds = np.tile([-DEFAULT_BOUND, DEFAULT_BOUND], (free, 1))
        else:
            bounds = np.array(self.bounds, dtype=float).reshape(-1, 2)
        if bounds.shape != (free, 2):
            raise ConfigError(f"fit bounds need one (low, high) pair per free parameter ({free})")
        if np.any(bounds[:, 0] >= bounds[:, 1]) or np.any(bounds[:, 0] > 0) or np.any(bounds[:, 1] < 0):
            raise ConfigError("fit bounds must satisfy low < high and contain the zero offset")
        object.__setattr__(self, 'bounds', bounds)

        if self.matching not in MATCHING_MODES:
            raise ConfigError(f"fit.matching must be one of {', '.join(MATCHING_MODES)}, got '{self.matching}'")
        if self.matching == 'nearest' and self.f_window is None:
            raise ConfigError("nearest matching needs fit.window_mhz")
        if self.f_window is not None and not self.f_window[0] < self.f_window[1]:
            raise ConfigError("fit.window_mhz must be an increasing (low, high) pair")
        for line in self.observed:
            if line.site_hint is not None and line.site_hint not in labels:
                raise ConfigError(f"observed line site '{line.site_hint}' is not one of {', '.join(labels)}")
            if self.matching == 'assigned':
                if line.assignment is None:
                    raise ConfigError(f"observed line {line.frequency} MHz has no assignment")
                pairs = len(spin_model.level_pairs(self._system_for(line).dimension)[0])
                if not 0 <= line.assignment < pairs:
                    raise ConfigError(f"assignment {line.assignment} out of range 0-{pairs - 1}")
        if self.restarts < 0:
            raise ConfigError("fit.restarts must be non-negative")
        if 0 < len(self.observed) < free:
            logger.warning("fit is underdetermined: %d observed lines for %d free parameters",
                           len(self.observed), free)

    def _system_for(self, line: ObservedLine) -> spin_model.SpinSystem:
        if line.site_hint is None:
            return self.base_systems[0]
        return next(s for s in self.base_systems if s.site_label == line.site_hint)

    @property
    def free_count(self) -> int:
        return int(self.free_mask.sum())

    @property
    def parameter_labels(self) -> List[str]:
        return [f"{system.site_label}.{name}"
                for system, row in zip(self.base_systems, self.free_mask)
                for name, free in zip(PARAMETER_NAMES, row) if free]


@dataclass(frozen=True, eq=False)
class FitResult:
    systems: Tuple[spin_model.SpinSystem, ...]
    parameters: np.ndarray  # offsets, MHz
    residuals: np.ndarray  # predicted - observed, MHz, in observation order
    objective: float
    baseline_objective: float
    converged: bool
    iterations: int
    restarts_used: int
    labels: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            'objective': self.objective,
            'baseline_objective': self.baseline_objective,
            'converged': self.converged,
            'iterations': self.iterations,
            'restarts_used': self.restarts_used,
            'parameters': dict(zip(self.labels, self.parameters.tolist())),
            'residuals_mhz': self.residuals.tolist(),
            'systems': {
                system.site_label: {'A': system.a_matrix.tolist(), 'Q': system.q_matrix.tolist()}
                for system in self.systems
            },
        }


def _symmetric(entries: np.ndarray) -> np.ndarray:
    matrix = np.zeros((3, 3))
    for value, (i, j) in zip(entries, _ENTRIES):
        matrix[i, j] = matrix[j, i] = value
    return matrix


def apply_parameters(problem: FitProblem, vector: Sequence[float]) -> Tuple[spin_model.SpinSystem, ...]:
    """Base systems with the offset vector added to their free A/Q entries"""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (problem.free_count,):
        raise ConfigError(f"parameter vector needs {problem.free_count} entries, got {vector.shape}")
    slack = 1e-9 * np.abs(problem.bounds).max(initial=1.0)
    if np.any(vector < problem.bounds[:, 0] - slack) or np.any(vector > problem.bounds[:, 1] + slack):
        raise ConfigError("parameter vector outside the fit bounds")

    offsets = np.zeros(problem.free_mask.shape)
    offsets[problem.free_mask] = vector
    return tuple(
        replace(system,
                a_matrix=system.a_matrix + _symmetric(row[:6]),
                q_matrix=system.q_matrix + _symmetric(row[6:]))
        for system, row in zip(problem.base_systems, offsets)
    )


def predict_lines(systems: Sequence[spin_model.SpinSystem], f_window: Optional[Tuple[float, float]] = None,
                  strength_floor: float = 0.0, direction: spin_model.Direction = spin_model.DEFAULT_DRIVE_AXIS,
                  temperature: float = 5.1) -> List[PredictedLine]:
    """
    Zero-field lines of every system inside the window, strongest partner
    first within merged degenerate groups, sorted by frequency then site.
    """
    lines = []
    for system in systems:
        levels = spin_model.zero_field_levels(system)
        transitions = spin_model.enumerate_transitions(levels, system, direction, temperature, f_window)
        group: List[spin_model.Transition] = []
        for transition in transitions + [None]:
            if group and (transition is None or transition.frequency - group[0].frequency > MERGE_TOL):
                strongest = max(group, key=lambda t: t.weighted_strength)
                strength = float(np.sqrt(sum(t.weighted_strength ** 2 for t in group)))
                if strength >= strength_floor:
                    lines.append(PredictedLine(group[0].frequency, strength, system.site_label,
                                               strongest.lower_index, strongest.upper_index))
                group = []
            if transition is not None:
                group.append(transition)
    return sorted(lines, key=lambda line: (line.frequency, line.site))


def _assigned_residuals(problem: FitProblem, systems: Sequence[spin_model.SpinSystem]) -> np.ndarray:
    by_site = {}
    for system in systems:
        values = np.linalg.eigvalsh(spin_model.zero_field_hamiltonian(system))
        lower, upper = spin_model.level_pairs(len(values))
        by_site[system.site_label] = values[upper] - values[lower]
    default_site = systems[0].site_label
    return np.array([by_site[line.site_hint or default_site][line.assignment] - line.frequency
                     for line in problem.observed])


def _nearest_residuals(problem: FitProblem, systems: Sequence[spin_model.SpinSystem]) -> np.ndarray:
    """
    Greedy one-to-one matching: closest pairs first, ties to the stronger
    predicted line. Unmatched observations get the window width as residual.
    """
    predicted = predict_lines(systems, problem.f_window, problem.strength_floor,
                              problem.direction, problem.temperature)
    candidates = sorted(
        (abs(line.frequency - observed.frequency), -line.strength, i, k)
        for i, observed in enumerate(problem.observed)
        for k, line in enumerate(predicted)
        if observed.site_hint is None or observed.site_hint == line.site
    )
    width = problem.f_window[1] - problem.f_window[0]
    residuals = np.full(len(problem.observed), width)
    matched_observed, used_predicted = set(), set()
    for _, _, i, k in candidates:
        if i in matched_observed or k in used_predicted:
            continue
        residuals[i] = predicted[k].frequency - problem.observed[i].frequency
        matched_observed.add(i)
        used_predicted.add(k)
    return residuals


def residuals_for(problem: FitProblem, systems: Sequence[spin_model.SpinSystem]) -> np.ndarray:
    if problem.matching == 'assigned':
        return _assigned_residuals(problem, systems)
    return _nearest_residuals(problem, systems)


def weighted_objective(problem: FitProblem, residuals: np.ndarray) -> float:
    uncertainties = np.array([line.uncertainty for line in problem.observed])
    return float(np.sum((residuals / uncertainties) ** 2))


def objective(problem: FitProblem, vector: Sequence[float]) -> float:
    """Sum of squared uncertainty-weighted residuals in MHz^2"""
    systems = apply_parameters(problem, vector)
    return weighted_objective(problem, residuals_for(problem, systems))


def _initial_simplex(start: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    widths = SIMPLEX_SCALE * (bounds[:, 1] - bounds[:, 0])
    simplex = np.tile(start, (len(start) + 1, 1))
    for k, width in enumerate(widths):
        forward = start[k] + width
        simplex[k + 1, k] = forward if forward <= bounds[k, 1] else start[k] - width
    return simplex


def _minimize_from(problem: FitProblem, start: np.ndarray):
    return minimize(
        lambda x: objective(problem, x),
        start,
        method='Nelder-Mead',
        bounds=problem.bounds,
        options={
            'initial_simplex': _initial_simplex(start, problem.bounds),
            'fatol': FATOL,
            'xatol': np.inf,
            'maxiter': MAX_ITERATIONS,
        },
    )


def fit(problem: FitProblem) -> FitResult:
    """
    Nelder-Mead from the zero offset, then from `restarts` uniform random
    starts inside the bounds if the zero start does not reach the target.
    The lowest objective wins (earliest start on ties); the result is never
    worse than the base systems.
    """
    if problem.free_count == 0:
        raise ConfigError("fit needs at least one free parameter")
    if not problem.observed:
        raise ConfigError("fit needs at least one observed line")

    zero = np.zeros(problem.free_count)
    baseline = objective(problem, zero)
    if baseline <= TARGET_OBJECTIVE:
        return _result(problem, zero, baseline, baseline, True, 0, 0)

    runs = [_minimize_from(problem, zero)]
    restarts_used = 0
    if runs[0].fun > TARGET_OBJECTIVE and problem.restarts:
        rng = np.random.default_rng(problem.seed)
        starts = rng.uniform(problem.bounds[:, 0], problem.bounds[:, 1],
                             size=(problem.restarts, problem.free_count))
        with ThreadPoolExecutor(max_workers=max(1, problem.threads)) as pool:
            runs.extend(pool.map(lambda start: _minimize_from(problem, start), starts))
        restarts_used = problem.restarts

    best_index = min(range(len(runs)), key=lambda k: (runs[k].fun, k))
    best = runs[best_index]
    iterations = int(sum(run.nit for run in runs))
    logger.debug("fit runs: %s", [round(float(run.fun), 9) for run in runs])
    if not best.fun < baseline:
        logger.warning("no fit run improved on the base systems (objective %.6g)", baseline)
        return _result(problem, zero, baseline, baseline, False, iterations, restarts_used)
    vector = np.clip(best.x, problem.bounds[:, 0], problem.bounds[:, 1])
    value = objective(problem, vector)
    if not value < baseline:
        return _result(problem, zero, baseline, baseline, False, iterations, restarts_used)
    return _result(problem, vector, value, baseline, bool(best.success), iterations, restarts_used)


def _result(problem, vector, value, baseline, converged, iterations, restarts_used) -> FitResult:
    systems = apply_parameters(problem, vector)
    return FitResult(
        systems=systems,
        parameters=np.asarray(vector, dtype=float),
        residuals=residuals_for(problem, systems),
        objective=value,
        baseline_objective=baseline,
        converged=converged,
        iterations=iterations,
        restarts_used=restarts_used,
        labels=problem.parameter_labels,
    )


def reduce_sweep(raw: SweepResult) -> PeakResult:
    """Centre, peak value and Q of a measured transmission sweep"""
    return extract_peak(raw)
