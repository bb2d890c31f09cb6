"""
Command bodies shared by the command-line interface and the HTTP API.

Each command takes a resolved RunConfig and returns a CommandResult holding
either a CSV table or, for fits, a JSON report. Rendering is deterministic:
the same configuration and seed always give byte-identical output.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import cavity_response
import data_io
import lineshape
import spin_fit
import spin_model
import thermal_coupling
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = {'span_linewidths': 10.0, 'points_per_linewidth': 20, 'jitter_sigma_mhz': 0.0, 'step_nm': 30.0}
DEFAULT_SATURATION = {
    'powers_dbm': [-60.0, -55.0, -50.0, -45.0, -40.0, -35.0, -30.0, -25.0, -20.0, -15.0, -10.0],
    'saturation_photons': 5e12,
    'coupling_correction': 1.0,
}
DEFAULT_LINE = {'width_mhz': 5.0, 'coupling_mhz': 0.15}
DEFAULT_LINESHAPE = {'method': 'exact', 'dimensionality': 1, 'axis': 'b', 'samples': 200_000}
DEFAULT_FIT = {'matching': 'nearest', 'default_bound_mhz': spin_fit.DEFAULT_BOUND, 'strength_floor': 0.0,
               'restarts': 8}
DEFAULT_BUDGET = {'gamma_star_mhz': 5.0, 'cold_temperature_kelvin': thermal_coupling.DEFAULT_COLD_TEMPERATURE,
                  'coupling_correction': 1.0}

COMMANDS = ('levels', 'transitions', 'sweep', 'saturation', 'lineshape', 'fit', 'budget')


@dataclass
class CommandResult:
    name: str
    header: List[str] = field(default_factory=list)
    rows: List[list] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    report: Optional[dict] = None

    def to_text(self) -> str:
        if self.report is not None:
            return json.dumps(self.report, sort_keys=True, indent=2) + '\n'
        return data_io.render_csv(self.header, self.rows, self.metadata)

    def as_dict(self) -> dict:
        result = {'command': self.name, 'metadata': self.metadata, 'header': self.header, 'rows': self.rows}
        if self.report is not None:
            result['report'] = self.report
        return result


def _metadata(config: data_io.RunConfig, command: str, **extra) -> Dict[str, Any]:
    metadata = {'command': command, 'config_hash': config.config_hash, 'seed': config.seed}
    metadata.update(extra)
    return metadata


def _grid(section: dict, where: str) -> np.ndarray:
    data_io.check_keys(section, data_io.GRID_KEYS, where)
    start = data_io.number(data_io.require(section, 'start_mhz', where), f"{where}.start_mhz")
    stop = data_io.number(data_io.require(section, 'stop_mhz', where), f"{where}.stop_mhz")
    step = data_io.number(data_io.require(section, 'step_mhz', where), f"{where}.step_mhz", positive=True)
    if stop < start:
        raise ConfigError(f"{where}.stop_mhz must not be below start_mhz")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _field_variants(system: spin_model.SpinSystem, field_vector: spin_model.FieldVector):
    """The site itself at zero field, otherwise its two magnetic subclasses"""
    if not np.any(field_vector.components):
        return [system]
    return list(spin_model.magnetic_subclasses(system))


def _levels(system: spin_model.SpinSystem, field_vector: spin_model.FieldVector) -> spin_model.EnergyLevels:
    return spin_model.eigensystem(spin_model.build_hamiltonian(system, field_vector))


def cmd_levels(config: data_io.RunConfig) -> CommandResult:
    rows = []
    for system in config.systems:
        for variant in _field_variants(system, config.static_field):
            levels = _levels(variant, config.static_field)
            rows.extend([variant.site_label, k, float(value)] for k, value in enumerate(levels.values))
    return CommandResult('levels', ['site', 'level', 'energy_mhz'], rows, _metadata(config, 'levels'))


def stick_spectrum(config: data_io.RunConfig, window: Optional[Tuple[float, float]],
                   coupling_floor: float = 0.0) -> List[Tuple[spin_model.Transition, float]]:
    """Every transition in the window with its collective coupling sqrt(N) g (MHz)"""
    mode = config.require_cavity()
    total = thermal_coupling.ion_count(config.require_ensemble())
    sticks = []
    for system in config.systems:
        variants = _field_variants(system, config.static_field)
        share = total / len(variants)
        for variant in variants:
            levels = _levels(variant, config.static_field)
            for transition in spin_model.enumerate_transitions(levels, variant, config.direction,
                                                               config.temperature, window):
                difference = max(share * transition.population_difference, 0.0)
                coupling = thermal_coupling.collective_coupling(transition, mode, difference)
                if coupling >= coupling_floor:
                    sticks.append((transition, coupling))
    sticks.sort(key=lambda stick: (stick[0].frequency, stick[0].site_label,
                                   stick[0].lower_index, stick[0].upper_index))
    return sticks


def cmd_transitions(config: data_io.RunConfig) -> CommandResult:
    section = config.section('transitions')
    window = data_io.interval(section['window_mhz'], 'transitions.window_mhz') if 'window_mhz' in section else None
    floor = data_io.number(section.get('coupling_floor_mhz', 0.0), 'transitions.coupling_floor_mhz')
    rows = [
        [t.frequency, coupling, t.site_label, t.lower_index, t.upper_index, t.dipole_element,
         t.population_difference]
        for t, coupling in stick_spectrum(config, window, floor)
    ]
    header = ['frequency_mhz', 'coupling_mhz', 'site', 'lower', 'upper', 'dipole_mhz_per_tesla',
              'population_difference']
    return CommandResult('transitions', header, rows,
                         _metadata(config, 'transitions', temperature_kelvin=config.temperature))


def _explicit_line(config: data_io.RunConfig, entry: dict, where: str,
                   default_center: Optional[float] = None) -> cavity_response.EnsembleLine:
    data_io.check_keys(entry, data_io.LINE_KEYS, where)
    if 'center_mhz' in entry or default_center is None:
        center = data_io.number(data_io.require(entry, 'center_mhz', where), f"{where}.center_mhz")
    else:
        center = default_center
    profile = None
    if 'profile_csv' in entry:
        profile = data_io.read_profile_csv(config.path(entry['profile_csv'], f"{where}.profile_csv"))
    homogeneous = entry.get('homogeneous_width_mhz')
    return cavity_response.EnsembleLine(
        center=center,
        width_gamma_star=data_io.number(entry.get('width_mhz', DEFAULT_LINE['width_mhz']), f"{where}.width_mhz"),
        coupling=data_io.number(entry.get('coupling_mhz', DEFAULT_LINE['coupling_mhz']), f"{where}.coupling_mhz"),
        profile=profile,
        homogeneous_width=None if homogeneous is None else data_io.number(homogeneous,
                                                                           f"{where}.homogeneous_width_mhz"),
    )


def _model_lines(config: data_io.RunConfig, entry: dict) -> List[cavity_response.EnsembleLine]:
    """Lorentzian lines at the spin model's transitions, coupled by their sqrt(N) g"""
    data_io.check_keys(entry, data_io.MODEL_LINE_KEYS, 'sweep.model_lines')
    window = data_io.interval(data_io.require(entry, 'window_mhz', 'sweep.model_lines'),
                              'sweep.model_lines.window_mhz')
    width = data_io.number(entry.get('width_mhz', DEFAULT_LINE['width_mhz']), 'sweep.model_lines.width_mhz', True)
    floor = data_io.number(entry.get('coupling_floor_mhz', 0.0), 'sweep.model_lines.coupling_floor_mhz')
    return [cavity_response.EnsembleLine(t.frequency, width, coupling)
            for t, coupling in stick_spectrum(config, window, floor) if coupling > 0]


def _sweep_frequencies(config: data_io.RunConfig, section: dict) -> np.ndarray:
    if 'gap_start_mm' in section:
        if config.tuning is None:
            raise ConfigError("sweep.gap_start_mm needs cavity.tuning")
        steps = section.get('gap_steps')
        if not isinstance(steps, int) or isinstance(steps, bool) or steps < 1:
            raise ConfigError("sweep.gap_steps must be a positive integer")
        return cavity_response.actuator_frequencies(
            config.tuning, data_io.number(section['gap_start_mm'], 'sweep.gap_start_mm'), steps,
            data_io.number(section.get('step_nm', DEFAULT_SWEEP['step_nm']), 'sweep.step_nm', True))
    return _grid({key: section[key] for key in data_io.GRID_KEYS if key in section}, 'sweep')


def cmd_sweep(config: data_io.RunConfig) -> CommandResult:
    """
    Step the cavity across the configured range and record the transmission
    peak and loaded Q at each step. The loaded Q and the external coupling
    ratio are held at their configured values while stepping.
    """
    section = config.section('sweep')
    mode = config.require_cavity()
    frequencies = _sweep_frequencies(config, section)
    lines = [_explicit_line(config, entry, f"sweep.lines[{k}]") for k, entry in enumerate(section.get('lines', []))]
    if 'model_lines' in section:
        lines.extend(_model_lines(config, section['model_lines']))
    span = data_io.number(section.get('span_linewidths', DEFAULT_SWEEP['span_linewidths']),
                          'sweep.span_linewidths', True)
    points = section.get('points_per_linewidth', DEFAULT_SWEEP['points_per_linewidth'])
    if not isinstance(points, int) or isinstance(points, bool) or points < 2:
        raise ConfigError("sweep.points_per_linewidth must be an integer >= 2")
    jitter = data_io.number(section.get('jitter_sigma_mhz', DEFAULT_SWEEP['jitter_sigma_mhz']),
                            'sweep.jitter_sigma_mhz')
    quality, coupling_ratio = mode.quality_factor, mode.kappa_ext / mode.linewidth_kappa

    def step(frequency):
        kappa = frequency / quality
        stepped = replace(mode, frequency=float(frequency), linewidth_kappa=kappa, kappa_ext=coupling_ratio * kappa)
        grid = cavity_response.resonance_grid(stepped, span, points)
        sweep = cavity_response.vibration_average(cavity_response.transmission(grid, stepped, lines), jitter)
        peak = cavity_response.extract_peak(sweep)
        return [float(frequency), peak.peak_frequency, peak.peak_value, peak.quality_factor]

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        rows = list(pool.map(step, frequencies))
    logger.debug("swept %d cavity frequencies with %d lines", len(rows), len(lines))
    header = ['cavity_frequency_mhz', 'peak_frequency_mhz', 'peak_s21_squared', 'quality_factor']
    return CommandResult('sweep', header, rows,
                         _metadata(config, 'sweep', lines=len(lines), jitter_sigma_mhz=jitter))


def cmd_saturation(config: data_io.RunConfig) -> CommandResult:
    section = config.section('saturation')
    mode = config.require_cavity()
    powers = section.get('powers_dbm', DEFAULT_SATURATION['powers_dbm'])
    if not isinstance(powers, list) or not powers:
        raise ConfigError("saturation.powers_dbm must be a non-empty list")
    powers = [data_io.number(p, 'saturation.powers_dbm') for p in powers]
    line = _explicit_line(config, section.get('line', {}), 'saturation.line', default_center=mode.frequency)
    photons = data_io.number(section.get('saturation_photons', DEFAULT_SATURATION['saturation_photons']),
                             'saturation.saturation_photons')
    correction = data_io.number(section.get('coupling_correction', DEFAULT_SATURATION['coupling_correction']),
                                'saturation.coupling_correction', True)
    points = cavity_response.saturation_sweep(powers, mode, line, photons, coupling_correction=correction,
                                              threads=config.threads)
    metadata = _metadata(config, 'saturation', line_center_mhz=line.center)
    if len(points) >= 3:
        metadata['knee_dbm'] = cavity_response.saturation_knee(points)
    rows = [[p.power_dbm, p.photon_number, p.peak_value, p.quality_factor] for p in points]
    return CommandResult('saturation', ['power_dbm', 'photon_number', 'peak_s21_squared', 'quality_factor'],
                         rows, metadata)


def _profile(config: data_io.RunConfig, section: dict, dist: lineshape.FieldDistribution, grid: np.ndarray,
             samples: int, seed: int, where: str) -> lineshape.LineProfile:
    if 'toy' in section:
        toy = section['toy']
        data_io.check_keys(toy, {'gap_mhz', 'slope_mhz_per_tesla'}, f"{where}.toy")
        crossing = lineshape.ToyCrossing(
            data_io.number(data_io.require(toy, 'gap_mhz', f"{where}.toy"), f"{where}.toy.gap_mhz"),
            data_io.number(data_io.require(toy, 'slope_mhz_per_tesla', f"{where}.toy"),
                           f"{where}.toy.slope_mhz_per_tesla"),
            dist.axis)
        return lineshape.toy_profile(crossing, dist, grid, samples, seed, config.threads)
    system = config.system(section.get('site'))
    pair = data_io.level_pair(data_io.require(section, 'pair', where), f"{where}.pair")
    method = section.get('method', DEFAULT_LINESHAPE['method'])
    return lineshape.synthesize_profile(system, pair, dist, grid, method, samples, seed, config.threads)


def cmd_lineshape(config: data_io.RunConfig) -> CommandResult:
    section = config.section('lineshape')
    dist = lineshape.FieldDistribution(
        data_io.number(data_io.require(section, 'sigma_b_tesla', 'lineshape'), 'lineshape.sigma_b_tesla'),
        section.get('dimensionality', DEFAULT_LINESHAPE['dimensionality']),
        section.get('axis', DEFAULT_LINESHAPE['axis']),
    )
    grid = _grid(data_io.require(section, 'grid', 'lineshape'), 'lineshape.grid')
    samples = section.get('samples', DEFAULT_LINESHAPE['samples'])
    if not isinstance(samples, int) or isinstance(samples, bool) or samples < 1:
        raise ConfigError("lineshape.samples must be a positive integer")

    profile = _profile(config, section, dist, grid, samples, config.seed, 'lineshape')
    if 'doublet' in section:
        doublet = section['doublet']
        data_io.check_keys(doublet, {'site', 'pair', 'toy', 'method', 'weights'}, 'lineshape.doublet')
        weights = doublet.get('weights', [1.0, 1.0])
        if not isinstance(weights, list) or len(weights) != 2:
            raise ConfigError("lineshape.doublet.weights must be a [w1, w2] pair")
        second = _profile(config, doublet, dist, grid, samples, config.seed + 1, 'lineshape.doublet')
        profile = lineshape.compose_doublet(profile, second,
                                            data_io.number(weights[0], 'lineshape.doublet.weights'),
                                            data_io.number(weights[1], 'lineshape.doublet.weights'))

    metadata = _metadata(config, 'lineshape', samples=samples, sigma_b_tesla=dist.sigma_b)
    try:
        metadata.update(lineshape.profile_summary(profile))
    except DataError as exc:
        logger.warning("profile summary skipped: %s", exc)
    rows = [[float(f), float(d)] for f, d in zip(profile.frequencies, profile.density)]
    return CommandResult('lineshape', list(data_io.PROFILE_COLUMNS), rows, metadata)


def _fit_problem(config: data_io.RunConfig) -> spin_fit.FitProblem:
    section = config.section('fit')
    if 'observed' in section:
        observed = data_io.parse_observed(section['observed'])
    elif 'observed_csv' in section:
        observed = data_io.read_observed_csv(config.path(section['observed_csv'], 'fit.observed_csv'))
    else:
        raise ConfigError("fit needs 'observed' lines or an 'observed_csv' file")

    labels = [f"{system.site_label}.{name}" for system in config.systems for name in spin_fit.PARAMETER_NAMES]
    free = section.get('free', [])
    if not isinstance(free, list):
        raise ConfigError("fit.free must be a list of parameter labels")
    for label in free:
        if label not in labels:
            raise ConfigError(f"unknown fit parameter '{label}'")
    mask = np.array([label in free for label in labels]).reshape(len(config.systems), -1)

    default_bound = data_io.number(section.get('default_bound_mhz', DEFAULT_FIT['default_bound_mhz']),
                                   'fit.default_bound_mhz', True)
    overrides = section.get('bounds_mhz', {})
    data_io.check_keys(overrides, free, 'fit.bounds_mhz')
    bounds = [data_io.interval(overrides[label], f"fit.bounds_mhz.{label}") if label in overrides
              else (-default_bound, default_bound)
              for label in labels if label in free]

    window = section.get('window_mhz', config.section('transitions').get('window_mhz'))
    restarts = section.get('restarts', DEFAULT_FIT['restarts'])
    if not isinstance(restarts, int) or isinstance(restarts, bool):
        raise ConfigError("fit.restarts must be an integer")
    return spin_fit.FitProblem(
        base_systems=tuple(config.systems),
        free_mask=mask,
        observed=tuple(observed),
        bounds=np.array(bounds).reshape(-1, 2),
        matching=section.get('matching', DEFAULT_FIT['matching']),
        f_window=None if window is None else data_io.interval(window, 'fit.window_mhz'),
        strength_floor=data_io.number(section.get('strength_floor', DEFAULT_FIT['strength_floor']),
                                      'fit.strength_floor'),
        direction=config.direction,
        temperature=config.temperature,
        restarts=restarts,
        seed=config.seed,
        threads=config.threads,
    )


def cmd_fit(config: data_io.RunConfig) -> CommandResult:
    problem = _fit_problem(config)
    result = spin_fit.fit(problem)
    rows = [[line.frequency, line.frequency + float(residual), float(residual), line.uncertainty]
            for line, residual in zip(problem.observed, result.residuals)]
    report = _metadata(config, 'fit', matching=problem.matching)
    report.update(result.as_dict())
    report['observed'] = [
        {'frequency_mhz': line.frequency, 'uncertainty_mhz': line.uncertainty,
         'site_hint': line.site_hint, 'assignment': line.assignment}
        for line in problem.observed
    ]
    header = ['observed_mhz', 'predicted_mhz', 'residual_mhz', 'uncertainty_mhz']
    return CommandResult('fit', header, rows, _metadata(config, 'fit'), report)


def _select_transition(config: data_io.RunConfig, section: dict, system: spin_model.SpinSystem,
                       levels: spin_model.EnergyLevels) -> spin_model.Transition:
    transitions = spin_model.enumerate_transitions(levels, system, config.direction, config.temperature)
    if 'pair' in section:
        lower, upper = data_io.level_pair(section['pair'], 'budget.pair')
        for transition in transitions:
            if (transition.lower_index, transition.upper_index) == (lower, upper):
                return transition
        raise ConfigError(f"budget.pair ({lower}, {upper}) is not a level pair of {system.site_label}")
    if 'frequency_mhz' in section:
        target = data_io.number(section['frequency_mhz'], 'budget.frequency_mhz')
        return min(transitions, key=lambda t: (abs(t.frequency - target), -t.weighted_strength,
                                               t.lower_index, t.upper_index))
    raise ConfigError("budget needs 'pair' or 'frequency_mhz' to select a transition")


def cmd_budget(config: data_io.RunConfig) -> CommandResult:
    """Photon number, population difference, couplings, Rabi frequency and cooperativity"""
    section = config.section('budget')
    mode = config.require_cavity()
    system = config.system(section.get('site'))
    levels = _levels(system, config.static_field)
    transition = _select_transition(config, section, system, levels)

    if 'input_power_dbm' in section and 'input_power_watts' in section:
        raise ConfigError("budget takes input_power_dbm or input_power_watts, not both")
    if 'input_power_watts' in section:
        power = data_io.number(section['input_power_watts'], 'budget.input_power_watts')
    else:
        power = thermal_coupling.dbm_to_watts(
            data_io.number(section.get('input_power_dbm', -25.0), 'budget.input_power_dbm'))
    override = section.get('coupling_override_mhz')

    budget = thermal_coupling.link_budget(
        mode, config.require_ensemble(), levels, transition, config.temperature, power,
        gamma_star=data_io.number(section.get('gamma_star_mhz', DEFAULT_BUDGET['gamma_star_mhz']),
                                  'budget.gamma_star_mhz', True),
        coupling_override=None if override is None else data_io.number(override, 'budget.coupling_override_mhz'),
        cold=data_io.number(section.get('cold_temperature_kelvin', DEFAULT_BUDGET['cold_temperature_kelvin']),
                            'budget.cold_temperature_kelvin', True),
        coupling_correction=data_io.number(section.get('coupling_correction', DEFAULT_BUDGET['coupling_correction']),
                                           'budget.coupling_correction', True),
    )
    rows = [
        ['transition_frequency', transition.frequency, 'MHz'],
        ['input_power', thermal_coupling.watts_to_dbm(power) if power > 0 else None, 'dBm'],
        ['photon_number', budget.photon_number, ''],
        ['ion_count', budget.ion_count, ''],
        ['population_difference', budget.population_difference, ''],
        ['single_photon_field', budget.single_photon_field, 'T'],
        ['single_coupling', budget.single_coupling, 'MHz'],
        ['collective_coupling', budget.collective_coupling, 'MHz'],
        ['rabi_frequency', budget.rabi_frequency, 'MHz'],
        ['cooperativity', budget.cooperativity, ''],
        ['cooling_gain', budget.cooling_gain, ''],
    ]
    if 'measured_quality_factor' in section:
        measured = data_io.number(section['measured_quality_factor'], 'budget.measured_quality_factor', True)
        rows.append(['vibration_sigma', cavity_response.vibration_sigma_for_q(mode, measured), 'MHz'])
    metadata = _metadata(config, 'budget', site=system.site_label, lower=transition.lower_index,
                         upper=transition.upper_index, cold_temperature_kelvin=budget.cold_temperature)
    return CommandResult('budget', ['quantity', 'value', 'unit'], rows, metadata)


def cmd_ingest(text: str, source: str) -> CommandResult:
    """Resonance frequency, peak and Q of a measured sweep given as CSV text"""
    sweep = data_io.parse_sweep_text(text)
    peak = spin_fit.reduce_sweep(sweep)
    metadata = {
        'command': 'ingest',
        'config_hash': hashlib.sha256(text.encode('utf-8')).hexdigest()[:16],
        'source': source,
    }
    rows = [[peak.peak_frequency, peak.peak_value, peak.quality_factor, peak.fwhm]]
    return CommandResult('ingest', ['peak_frequency_mhz', 'peak_s21_squared', 'quality_factor', 'fwhm_mhz'],
                         rows, metadata)


def ingest_file(path) -> CommandResult:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except UnicodeDecodeError:
        raise DataError(f"{path} is not UTF-8 text")
    return cmd_ingest(text, path.name)


def run_command(name: str, config: data_io.RunConfig) -> CommandResult:
    handlers = {
        'levels': cmd_levels,
        'transitions': cmd_transitions,
        'sweep': cmd_sweep,
        'saturation': cmd_saturation,
        'lineshape': cmd_lineshape,
        'fit': cmd_fit,
        'budget': cmd_budget,
    }
    if name not in handlers:
        raise ConfigError(f"unknown command '{name}'")
    return handlers[name](config)
