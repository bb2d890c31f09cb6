"""
Run configuration loading, CSV ingestion and atomic export.

A run document is JSON with unit-bearing key names. The spin system, ensemble
and cavity documents it references are either paths (relative to the run
document) or inline objects. Unknown keys are rejected everywhere.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pandas.errors import EmptyDataError, ParserError

import spin_model
from cavity_response import SweepResult, TuningCalibration
from errors import ConfigError, DataError
from lineshape import LineProfile
from spin_fit import ObservedLine
from thermal_coupling import CavityMode, EnsembleSpec

logger = logging.getLogger(__name__)

DEFAULT_RUN = {
    'seed': 0,
    'threads': 1,
    'temperature_kelvin': 5.1,
    'drive_direction': spin_model.DEFAULT_DRIVE_AXIS,
    'static_field_tesla': [0.0, 0.0, 0.0],
}

RUN_KEYS = {'spin_systems', 'ensemble', 'cavity', 'seed', 'threads', 'temperature_kelvin',
            'drive_direction', 'static_field_tesla', 'transitions', 'sweep', 'saturation',
            'lineshape', 'fit', 'budget'}
SITE_KEYS = {'site_label', 'g', 'A', 'Q', 'g_n', 'electron_multiplicity', 'nuclear_multiplicity'}
ENSEMBLE_KEYS = {'dopant_fraction', 'sample_volume_m3', 'sample_diameter_mm', 'sample_length_mm',
                 'host_site_density_per_m3', 'sites_per_ion_class'}
CAVITY_KEYS = {'frequency_mhz', 'linewidth_kappa_mhz', 'quality_factor', 'kappa_ext_mhz',
               'mode_volume_m3', 'filling_factor', 'tuning'}
TUNING_KEYS = {'slope_mhz_per_mm', 'step_nm', 'shift_mhz', 'reference_gap_mm',
               'reference_frequency_mhz', 'range_mhz'}
SECTION_KEYS = {
    'transitions': {'window_mhz', 'coupling_floor_mhz'},
    'sweep': {'start_mhz', 'stop_mhz', 'step_mhz', 'gap_start_mm', 'gap_steps', 'step_nm',
              'span_linewidths', 'points_per_linewidth', 'jitter_sigma_mhz', 'lines', 'model_lines'},
    'saturation': {'powers_dbm', 'saturation_photons', 'line', 'coupling_correction'},
    'lineshape': {'site', 'pair', 'toy', 'method', 'sigma_b_tesla', 'dimensionality', 'axis',
                  'grid', 'samples', 'doublet'},
    'fit': {'observed_csv', 'observed', 'free', 'bounds_mhz', 'default_bound_mhz', 'matching',
            'window_mhz', 'strength_floor', 'restarts'},
    'budget': {'site', 'pair', 'frequency_mhz', 'input_power_dbm', 'input_power_watts',
               'gamma_star_mhz', 'coupling_override_mhz', 'cold_temperature_kelvin',
               'coupling_correction', 'measured_quality_factor'},
}
LINE_KEYS = {'center_mhz', 'width_mhz', 'coupling_mhz', 'profile_csv', 'homogeneous_width_mhz'}
MODEL_LINE_KEYS = {'width_mhz', 'window_mhz', 'coupling_floor_mhz'}
GRID_KEYS = {'start_mhz', 'stop_mhz', 'step_mhz'}
OBSERVED_KEYS = {'frequency_mhz', 'uncertainty_mhz', 'site_hint', 'assignment'}

SWEEP_COLUMNS = ('frequency_mhz', 's21_squared')
PROFILE_COLUMNS = ('frequency_mhz', 'density_per_mhz')
OBSERVED_COLUMNS = ('frequency_mhz', 'uncertainty_mhz', 'site_hint', 'assignment')


def check_keys(mapping: Any, allowed: Iterable[str], where: str) -> dict:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key '{where}.{unknown[0]}'" if where else f"unknown key '{unknown[0]}'")
    return mapping


def require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"missing key '{where}.{key}'")
    return mapping[key]


def number(value: Any, where: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{where} must be a finite number")
    if positive and value <= 0:
        raise ConfigError(f"{where} must be positive")
    return float(value)


def interval(value: Any, where: str) -> Tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{where} must be a [low, high] pair")
    low, high = number(value[0], where), number(value[1], where)
    if not low <= high:
        raise ConfigError(f"{where} must satisfy low <= high")
    return low, high


def level_pair(value: Any, where: str) -> Tuple[int, int]:
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        raise ConfigError(f"{where} must be a [lower, upper] pair of level indices")
    return int(value[0]), int(value[1])


def _read_json(path: Path) -> dict:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")


def _resolve_document(value: Any, base_dir: Path, where: str, allow_paths: bool) -> dict:
    if isinstance(value, str):
        if not allow_paths:
            raise ConfigError(f"{where} must be an inline object here, file references are not accepted")
        return _read_json(base_dir / value)
    if isinstance(value, dict):
        return value
    raise ConfigError(f"{where} must be a file path or an inline object")


def _matrix(value: Any, where: str) -> np.ndarray:
    try:
        matrix = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} is not a numeric matrix")
    if matrix.shape != (3, 3):
        raise ConfigError(f"{where} must be a 3x3 matrix")
    return matrix


def parse_spin_system(document: dict) -> spin_model.SpinSystem:
    label = document.get('site_label', 'site1') if isinstance(document, dict) else 'site'
    check_keys(document, SITE_KEYS, label)
    return spin_model.SpinSystem(
        g_matrix=_matrix(require(document, 'g', label), f"{label}.g"),
        a_matrix=_matrix(require(document, 'A', label), f"{label}.A"),
        q_matrix=_matrix(document.get('Q', np.zeros((3, 3)).tolist()), f"{label}.Q"),
        g_n=number(document.get('g_n', -0.1618), f"{label}.g_n"),
        site_label=str(label),
        electron_multiplicity=document.get('electron_multiplicity', 2),
        nuclear_multiplicity=document.get('nuclear_multiplicity', 8),
    )


def parse_ensemble(document: dict) -> EnsembleSpec:
    check_keys(document, ENSEMBLE_KEYS, 'ensemble')
    fraction = number(require(document, 'dopant_fraction', 'ensemble'), 'ensemble.dopant_fraction')
    options = {}
    if 'host_site_density_per_m3' in document:
        options['host_site_density'] = number(document['host_site_density_per_m3'],
                                              'ensemble.host_site_density_per_m3')
    if 'sites_per_ion_class' in document:
        options['sites_per_ion_class'] = document['sites_per_ion_class']
    if 'sample_volume_m3' in document:
        return EnsembleSpec(fraction, number(document['sample_volume_m3'], 'ensemble.sample_volume_m3'),
                            **options)
    diameter = number(require(document, 'sample_diameter_mm', 'ensemble'), 'ensemble.sample_diameter_mm', True)
    length = number(require(document, 'sample_length_mm', 'ensemble'), 'ensemble.sample_length_mm', True)
    return EnsembleSpec.cylinder(diameter * 1e-3, length * 1e-3, fraction, **options)


def parse_cavity(document: dict) -> Tuple[CavityMode, Optional[TuningCalibration]]:
    check_keys(document, CAVITY_KEYS, 'cavity')
    frequency = number(require(document, 'frequency_mhz', 'cavity'), 'cavity.frequency_mhz', True)
    if 'linewidth_kappa_mhz' in document:
        kappa = number(document['linewidth_kappa_mhz'], 'cavity.linewidth_kappa_mhz', True)
    else:
        kappa = frequency / number(require(document, 'quality_factor', 'cavity'), 'cavity.quality_factor', True)
    mode = CavityMode(
        frequency=frequency,
        linewidth_kappa=kappa,
        mode_volume=number(require(document, 'mode_volume_m3', 'cavity'), 'cavity.mode_volume_m3', True),
        kappa_ext=number(document['kappa_ext_mhz'], 'cavity.kappa_ext_mhz') if 'kappa_ext_mhz' in document else None,
        filling_factor=number(document.get('filling_factor', 1.0), 'cavity.filling_factor'),
    )
    tuning = None
    if 'tuning' in document:
        tuning = parse_tuning(document['tuning'], frequency)
    return mode, tuning


def parse_tuning(document: dict, default_frequency: float) -> TuningCalibration:
    check_keys(document, TUNING_KEYS, 'cavity.tuning')
    reference_gap = number(require(document, 'reference_gap_mm', 'cavity.tuning'), 'cavity.tuning.reference_gap_mm')
    reference_frequency = number(document.get('reference_frequency_mhz', default_frequency),
                                 'cavity.tuning.reference_frequency_mhz')
    options = {}
    if 'range_mhz' in document:
        options['tuning_range'] = interval(document['range_mhz'], 'cavity.tuning.range_mhz')
    if 'slope_mhz_per_mm' in document:
        return TuningCalibration(number(document['slope_mhz_per_mm'], 'cavity.tuning.slope_mhz_per_mm'),
                                 reference_gap, reference_frequency, **options)
    return TuningCalibration.from_step(
        number(document.get('step_nm', 30.0), 'cavity.tuning.step_nm'),
        number(document.get('shift_mhz', 0.1), 'cavity.tuning.shift_mhz'),
        reference_gap, reference_frequency, **options)


@dataclass
class RunConfig:
    """Fully resolved run document"""

    document: Dict[str, Any]
    base_dir: Path
    systems: List[spin_model.SpinSystem]
    ensemble: Optional[EnsembleSpec] = None
    cavity: Optional[CavityMode] = None
    tuning: Optional[TuningCalibration] = None
    allow_paths: bool = True
    sections: Dict[str, dict] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.document['seed']

    @property
    def threads(self) -> int:
        return self.document['threads']

    @property
    def temperature(self) -> float:
        return self.document['temperature_kelvin']

    @property
    def direction(self):
        return self.document['drive_direction']

    @property
    def static_field(self) -> spin_model.FieldVector:
        return spin_model.FieldVector(self.document['static_field_tesla'])

    @property
    def config_hash(self) -> str:
        return config_hash(self.document)

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    def require_cavity(self) -> CavityMode:
        if self.cavity is None:
            raise ConfigError("missing key 'cavity'")
        return self.cavity

    def require_ensemble(self) -> EnsembleSpec:
        if self.ensemble is None:
            raise ConfigError("missing key 'ensemble'")
        return self.ensemble

    def system(self, label: Optional[str]) -> spin_model.SpinSystem:
        if label is None:
            return self.systems[0]
        for system in self.systems:
            if system.site_label == label:
                return system
        raise ConfigError(f"unknown site '{label}', expected one of "
                          f"{', '.join(s.site_label for s in self.systems)}")

    def path(self, relative: str, where: str) -> Path:
        if not self.allow_paths:
            raise ConfigError(f"{where} file references are not accepted here")
        return self.base_dir / relative


def config_hash(document: dict) -> str:
    """First 16 hex digits of SHA-256 over the canonical JSON"""
    canonical = json.dumps(document, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def build_run_config(document: dict, base_dir: Path, seed: Optional[int] = None,
                     threads: Optional[int] = None, allow_paths: bool = True) -> RunConfig:
    """Validate a run document, resolve referenced documents and apply overrides"""
    check_keys(document, RUN_KEYS, '')
    resolved = copy.deepcopy(DEFAULT_RUN)
    resolved.update(copy.deepcopy(document))
    if seed is not None:
        resolved['seed'] = seed
    if threads is not None:
        resolved['threads'] = threads

    if not isinstance(resolved['seed'], int) or isinstance(resolved['seed'], bool) or resolved['seed'] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(resolved['threads'], int) or isinstance(resolved['threads'], bool) or resolved['threads'] < 1:
        raise ConfigError("threads must be a positive integer")
    number(resolved['temperature_kelvin'], 'temperature_kelvin', positive=True)
    spin_model.unit_vector(resolved['drive_direction'])
    spin_model.FieldVector(resolved['static_field_tesla'])

    sites = require(resolved, 'spin_systems', '')
    if isinstance(sites, (str, dict)):
        sites = [sites]
    if not isinstance(sites, list) or not sites:
        raise ConfigError("spin_systems must list at least one spin system")
    resolved['spin_systems'] = [_resolve_document(site, base_dir, 'spin_systems', allow_paths) for site in sites]
    systems = [parse_spin_system(site) for site in resolved['spin_systems']]
    labels = [system.site_label for system in systems]
    if len(set(labels)) != len(labels):
        raise ConfigError("spin_systems have duplicate site labels")

    ensemble = cavity = tuning = None
    if 'ensemble' in resolved:
        resolved['ensemble'] = _resolve_document(resolved['ensemble'], base_dir, 'ensemble', allow_paths)
        ensemble = parse_ensemble(resolved['ensemble'])
    if 'cavity' in resolved:
        resolved['cavity'] = _resolve_document(resolved['cavity'], base_dir, 'cavity', allow_paths)
        cavity, tuning = parse_cavity(resolved['cavity'])

    sections = {}
    for name, allowed in SECTION_KEYS.items():
        if name in resolved:
            sections[name] = check_keys(resolved[name], allowed, name)

    config = RunConfig(resolved, base_dir, systems, ensemble, cavity, tuning, allow_paths, sections)
    logger.debug("loaded run configuration %s with sites %s", config.config_hash, labels)
    return config


def load_run_config(path, seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    path = Path(path)
    return build_run_config(_read_json(path), path.parent, seed, threads)


def format_value(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]],
               metadata: Optional[Dict[str, Any]] = None) -> str:
    """CSV text with '#' key=value metadata lines above the header row"""
    output = io.StringIO()
    for key, value in (metadata or {}).items():
        output.write(f"# {key}={format_value(value)}\n")
    writer = csv.writer(output, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(value) for value in row])
    return output.getvalue()


def write_atomic(path, content: Union[str, bytes]) -> None:
    """Write to a temporary file next to path, then rename over it"""
    path = Path(path)
    fd, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    data = content.encode('utf-8') if isinstance(content, str) else content
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


@dataclass
class CsvTable:
    metadata: Dict[str, str]
    frame: pd.DataFrame  # stripped string cells, blank where empty
    line_numbers: List[int]  # file line of each frame row
    header_line: int = 0

    @property
    def header(self) -> List[str]:
        return list(self.frame.columns)

    def line_of(self, row: int) -> Optional[int]:
        return self.line_numbers[row] if row < len(self.line_numbers) else None

    def cells(self, name: str) -> pd.Series:
        if name not in self.frame.columns:
            raise DataError(f"missing column '{name}'", line_number=self.header_line)
        return self.frame[name]


def parse_csv_text(text: str) -> CsvTable:
    """Split '#' metadata lines, the mandatory header row and the data rows"""
    metadata, content_lines = {}, []
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith('#'):
            key, sep, value = stripped[1:].partition('=')
            if sep:
                metadata[key.strip()] = value.strip()
        elif stripped:
            content_lines.append(line_number)

    try:
        frame = pd.read_csv(io.StringIO(text), comment='#', dtype=str, keep_default_na=False,
                            skip_blank_lines=True)
    except EmptyDataError:
        raise DataError("CSV has no header row")
    except ParserError as exc:
        match = re.search(r'Expected (\d+) fields in line (\d+), saw (\d+)', str(exc))
        if match is None:
            raise DataError(f"malformed CSV: {exc}")
        expected, line_number, found = (int(group) for group in match.groups())
        raise DataError(f"expected {expected} fields, found {found}", line_number=line_number)

    frame.columns = [str(name).strip() for name in frame.columns]
    frame = frame.fillna('').astype(str)
    for k in range(frame.shape[1]):
        frame.iloc[:, k] = frame.iloc[:, k].str.strip()
    return CsvTable(metadata, frame, content_lines[1:], content_lines[0] if content_lines else 0)


def _numeric_column(table: CsvTable, name: str) -> np.ndarray:
    cells = table.cells(name)
    values = pd.to_numeric(cells, errors='coerce').to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad):
        row = int(bad[0])
        cell = cells.iloc[row]
        reason = "is not finite" if pd.notna(pd.to_numeric(cell, errors='coerce')) else "is not a number"
        raise DataError(f"{name} '{cell}' {reason}", line_number=table.line_of(row))
    return values


def _numeric_columns(table: CsvTable, names: Sequence[str]) -> List[np.ndarray]:
    return [_numeric_column(table, name) for name in names]


def _read_text(path) -> str:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except UnicodeDecodeError:
        raise DataError(f"{path} is not UTF-8 text")


def parse_sweep_text(text: str) -> SweepResult:
    table = parse_csv_text(text)
    frequencies, values = _numeric_columns(table, SWEEP_COLUMNS)
    if len(frequencies) < 3:
        raise DataError("sweep needs at least three data rows")
    negative = np.flatnonzero(values < 0)
    if len(negative):
        raise DataError("s21_squared must be non-negative", line_number=table.line_of(int(negative[0])))
    if np.any(np.diff(frequencies) <= 0):
        order = np.argsort(frequencies, kind='stable')
        if np.any(np.diff(frequencies[order]) == 0):
            raise DataError("sweep has repeated frequencies")
        frequencies, values = frequencies[order], values[order]
    return SweepResult(frequencies, values, dict(table.metadata))


def read_sweep_csv(path) -> SweepResult:
    return parse_sweep_text(_read_text(path))


def read_profile_csv(path) -> LineProfile:
    table = parse_csv_text(_read_text(path))
    frequencies, density = _numeric_columns(table, PROFILE_COLUMNS)
    return LineProfile.normalized(frequencies, density)


def _observed_from_mapping(entry: dict, where: str) -> ObservedLine:
    check_keys(entry, OBSERVED_KEYS, where)
    assignment = entry.get('assignment')
    if assignment is not None and (not isinstance(assignment, int) or isinstance(assignment, bool)):
        raise ConfigError(f"{where}.assignment must be an integer")
    return ObservedLine(
        frequency=number(require(entry, 'frequency_mhz', where), f"{where}.frequency_mhz"),
        uncertainty=number(entry.get('uncertainty_mhz', 1.0), f"{where}.uncertainty_mhz"),
        site_hint=entry.get('site_hint'),
        assignment=assignment,
    )


def parse_observed(entries: Any) -> List[ObservedLine]:
    if not isinstance(entries, list):
        raise ConfigError("fit.observed must be a list")
    return [_observed_from_mapping(entry, f"fit.observed[{k}]") for k, entry in enumerate(entries)]


def read_observed_csv(path) -> List[ObservedLine]:
    """Observed lines; only frequency_mhz is mandatory, blank cells take defaults"""
    table = parse_csv_text(_read_text(path))
    frequencies = _numeric_column(table, 'frequency_mhz')
    frame = table.frame.reindex(columns=list(OBSERVED_COLUMNS), fill_value='')
    uncertainties = pd.to_numeric(frame['uncertainty_mhz'].replace('', '1.0'), errors='coerce')
    assignments = pd.to_numeric(frame['assignment'], errors='coerce')

    lines = []
    for row, (frequency, uncertainty, site, assignment) in enumerate(
            zip(frequencies, uncertainties, frame['site_hint'], assignments)):
        line_number = table.line_of(row)
        raw = frame['assignment'].iloc[row]
        if raw and (pd.isna(assignment) or assignment != int(assignment)):
            raise DataError(f"assignment '{raw}' is not an integer", line_number=line_number)
        if pd.isna(uncertainty) or not math.isfinite(uncertainty):
            raise DataError(f"uncertainty_mhz '{frame['uncertainty_mhz'].iloc[row]}' is not a number",
                            line_number=line_number)
        try:
            lines.append(ObservedLine(
                frequency=float(frequency),
                uncertainty=float(uncertainty),
                site_hint=site or None,
                assignment=int(assignment) if raw else None,
            ))
        except ConfigError as exc:
            raise DataError(str(exc), line_number=line_number)
    return lines
