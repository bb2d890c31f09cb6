import sys

import numpy as np

import data_io
import spin_model
from errors import SpectroscopyError

# Sections every command family relies on
sections = [
    ('ensemble', 'transitions, sweep model lines, budget'),
    ('cavity', 'transitions, sweep, saturation, budget'),
    ('sweep', 'sweep'),
    ('saturation', 'saturation'),
    ('lineshape', 'lineshape'),
    ('fit', 'fit'),
    ('budget', 'budget'),
]


def level_summary(system):
    """One line per cluster of degenerate zero-field levels"""
    values = spin_model.zero_field_levels(system).values
    labels = spin_model.degenerate_clusters(values)
    lines = []
    for label in np.unique(labels):
        members = values[labels == label]
        lines.append(f'    {members.mean():12.4f} MHz  x{len(members)}')
    return lines


def check_config(path):
    """Print a checklist for a run configuration; return True when it loads"""
    try:
        config = data_io.load_run_config(path)
    except SpectroscopyError as e:
        print(f'✗ {path}: {e}')
        return False

    print(f'✓ {path} (config hash {config.config_hash})')
    print(f'  seed={config.seed} threads={config.threads} '
          f'temperature={config.temperature} K drive={config.direction}')

    for name, used_by in sections:
        present = getattr(config, name) is not None if name in ('ensemble', 'cavity') else name in config.sections
        mark = '✓' if present else '✗'
        print(f'  {mark} {name:<11} ({used_by})')

    if config.cavity is not None:
        print(f'  cavity: {config.cavity.frequency:.3f} MHz, Q = {config.cavity.quality_factor:.4g}')
    if config.tuning is not None:
        print(f'  tuning: {config.tuning.slope:.4g} MHz/mm around gap {config.tuning.reference_gap} mm')

    ok = True
    for system in config.systems:
        print(f'\nZero-field levels of {system.site_label}:')
        try:
            for line in level_summary(system):
                print(line)
        except SpectroscopyError as e:
            print(f'  ✗ {e}')
            ok = False
    return ok


if __name__ == '__main__':
    if len(sys.argv) != 2:
        print('usage: python check_config.py CONFIG')
        sys.exit(2)
    sys.exit(0 if check_config(sys.argv[1]) else 2)
