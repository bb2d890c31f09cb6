import json
from pathlib import Path

import numpy as np
import pytest

from spin_model import SpinSystem
from thermal_coupling import CavityMode, EnsembleSpec

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'

GENERIC_G = [[3.0, -2.0, -3.0], [-2.0, 8.0, 5.0], [-3.0, 5.0, 5.0]]
GENERIC_A = [[300.0, 40.0, -60.0], [40.0, 800.0, 25.0], [-60.0, 25.0, 1200.0]]
GENERIC_Q = [[12.0, 3.0, -2.0], [3.0, -5.0, 1.5], [-2.0, 1.5, -7.0]]

PAPER_LINES = (3045.9, 3066.5, 3147.4, 3176.2)


def isotropic(a, label='site1'):
    return SpinSystem(g_matrix=np.diag([3.0, 8.0, 5.0]), a_matrix=a * np.eye(3),
                      q_matrix=np.zeros((3, 3)), site_label=label)


@pytest.fixture
def generic_system():
    return SpinSystem(g_matrix=np.array(GENERIC_G), a_matrix=np.array(GENERIC_A), q_matrix=np.array(GENERIC_Q))


@pytest.fixture
def isotropic_system():
    return isotropic(750.0)


@pytest.fixture
def loop_gap_mode():
    """3.1 GHz mode, loaded Q 9e4"""
    return CavityMode(frequency=3100.0, linewidth_kappa=3100.0 / 9e4, mode_volume=3e-7, filling_factor=0.5)


@pytest.fixture
def yso_ensemble():
    """50 ppm, 4.95 mm x 12 mm cylinder"""
    return EnsembleSpec.cylinder(4.95e-3, 12e-3, 50e-6)


def site_document(label, a_matrix, q_matrix=None, g_matrix=None):
    return {
        'site_label': label,
        'g': g_matrix or GENERIC_G,
        'A': a_matrix,
        'Q': q_matrix or [[0.0] * 3 for _ in range(3)],
    }


@pytest.fixture
def run_document():
    """Inline run document with an isotropic site (a = 750 MHz, 4a = 3000 MHz)"""
    return {
        'spin_systems': [site_document('site1', (750.0 * np.eye(3)).tolist())],
        'ensemble': {'dopant_fraction': 5e-5, 'sample_diameter_mm': 4.95, 'sample_length_mm': 12.0},
        'cavity': {'frequency_mhz': 3100.0, 'quality_factor': 9e4, 'mode_volume_m3': 3e-7,
                   'filling_factor': 0.5},
        'seed': 0,
    }


@pytest.fixture
def write_config(tmp_path):
    """Write a run document (and optional side files) to tmp_path, return its path"""
    def write(document, **files):
        for name, content in files.items():
            target = tmp_path / name.replace('__', '.')
            target.write_text(content if isinstance(content, str) else json.dumps(content), encoding='utf-8')
        path = tmp_path / 'run.json'
        path.write_text(json.dumps(document), encoding='utf-8')
        return path
    return write


def lorentzian_csv(center=3050.0, kappa=0.03, step_fraction=20, span=10, peak=0.25):
    """Bare-cavity |S21|^2 sweep as CSV text"""
    step = kappa / step_fraction
    frequencies = center + step * np.arange(-span * step_fraction, span * step_fraction + 1)
    values = peak / (1 + (2 * (frequencies - center) / kappa) ** 2)
    lines = ['# source=synthetic', 'frequency_mhz,s21_squared']
    lines += [f'{f!r},{v!r}' for f, v in zip(frequencies.tolist(), values.tolist())]
    return '\n'.join(lines) + '\n'
