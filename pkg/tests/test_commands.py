import numpy as np
import pytest
from scipy.signal import find_peaks

import commands
import data_io
from conftest import CONFIG_DIR, lorentzian_csv, site_document
from errors import ConfigError

LINE_CENTERS = (3045.9, 3066.5, 3147.4, 3176.2)


@pytest.fixture
def build(run_document, tmp_path):
    """RunConfig from the inline document with extra top-level keys"""
    def make(**extra):
        document = dict(run_document)
        document.update(extra)
        return data_io.build_run_config(document, tmp_path)
    return make


def rows_by_quantity(result):
    return {row[0]: row[1] for row in result.rows}


def test_levels_of_isotropic_site(build):
    result = commands.cmd_levels(build())

    energies = [row[2] for row in result.rows]
    assert result.header == ['site', 'level', 'energy_mhz']
    np.testing.assert_allclose(energies, [-1687.5] * 7 + [1312.5] * 9, rtol=1e-9)
    assert result.metadata['command'] == 'levels'


def test_levels_without_hyperfine_coupling(build):
    zeros = [[0.0] * 3 for _ in range(3)]
    result = commands.cmd_levels(build(spin_systems=[site_document('site1', zeros)]))

    np.testing.assert_allclose([row[2] for row in result.rows], np.zeros(16), atol=1e-12)


def test_levels_in_a_static_field_list_both_subclasses(build):
    result = commands.cmd_levels(build(static_field_tesla=[0.01, 0.0, 0.01]))

    assert len(result.rows) == 32
    assert {row[0] for row in result.rows} == {'site1a', 'site1b'}


def test_transitions_in_a_window(build):
    result = commands.cmd_transitions(build(transitions={'window_mhz': [2900.0, 3100.0]}))

    assert len(result.rows) == 63
    assert all(row[0] == pytest.approx(3000.0) for row in result.rows)
    assert all(row[1] >= 0 for row in result.rows)
    assert result.metadata['temperature_kelvin'] == 5.1


def test_empty_window_gives_a_header_only_table(build):
    result = commands.cmd_transitions(build(transitions={'window_mhz': [3100.0, 3200.0]}))
    lines = result.to_text().splitlines()

    assert result.rows == []
    assert lines[-1] == ','.join(result.header)
    assert all(line.startswith('#') for line in lines[:-1])


def test_hot_ensemble_has_negligible_coupling(build):
    result = commands.cmd_transitions(build(temperature_kelvin=1e9, transitions={'window_mhz': [2900.0, 3100.0]}))

    assert result.rows
    assert max(row[1] for row in result.rows) < 1e-3


def test_transitions_need_a_cavity(run_document, tmp_path):
    del run_document['cavity']
    config = data_io.build_run_config(run_document, tmp_path)
    with pytest.raises(ConfigError, match="cavity"):
        commands.cmd_transitions(config)


def bench_sweep(**overrides):
    section = {
        'start_mhz': 3020.0, 'stop_mhz': 3200.0, 'step_mhz': 0.5,
        'lines': [{'center_mhz': c, 'width_mhz': 5.0, 'coupling_mhz': 0.15} for c in LINE_CENTERS],
    }
    section.update(overrides)
    return section


def test_sweep_shows_one_dip_per_line(build):
    result = commands.cmd_sweep(build(sweep=bench_sweep()))
    table = np.array(result.rows)
    cavity, peaks, qs = table[:, 0], table[:, 2], table[:, 3]

    dips, _ = find_peaks(-peaks, prominence=1e-3)
    assert len(dips) == 4
    for dip, center in zip(dips, LINE_CENTERS):
        assert abs(cavity[dip] - center) <= 0.5

    q_dips, _ = find_peaks(-qs, prominence=0.1 * (qs.max() - qs.min()))
    assert len(q_dips) == 4
    np.testing.assert_allclose(cavity[q_dips], cavity[dips], atol=1.0)
    assert result.metadata['lines'] == 4


def test_sweep_without_lines_is_flat(build):
    result = commands.cmd_sweep(build(sweep={'start_mhz': 3090.0, 'stop_mhz': 3110.0, 'step_mhz': 1.0}))
    table = np.array(result.rows)

    assert len(table) == 21
    np.testing.assert_allclose(table[:, 2], 0.25, rtol=1e-9)
    np.testing.assert_allclose(table[:, 3], 9e4, rtol=1e-6)
    np.testing.assert_allclose(table[:, 1], table[:, 0], atol=1e-6)


def test_vibration_jitter_lowers_every_q(build):
    section = {'start_mhz': 3090.0, 'stop_mhz': 3110.0, 'step_mhz': 5.0}
    still = np.array(commands.cmd_sweep(build(sweep=section)).rows)
    shaken = np.array(commands.cmd_sweep(build(sweep=dict(section, jitter_sigma_mhz=0.01))).rows)

    assert np.all(shaken[:, 3] < still[:, 3])
    assert np.all(shaken[:, 2] < still[:, 2])


def test_sweep_by_actuator_steps(build, run_document):
    cavity = dict(run_document['cavity'], tuning={'step_nm': 30.0, 'shift_mhz': 0.1, 'reference_gap_mm': 0.5})
    result = commands.cmd_sweep(build(cavity=cavity, sweep={'gap_start_mm': 0.5, 'gap_steps': 4}))

    np.testing.assert_allclose([row[0] for row in result.rows], [3100.0, 3100.1, 3100.2, 3100.3])


def test_actuator_sweep_needs_a_calibration(build):
    with pytest.raises(ConfigError, match="tuning"):
        commands.cmd_sweep(build(sweep={'gap_start_mm': 0.5, 'gap_steps': 4}))


def test_sweep_with_model_lines(build):
    section = {'start_mhz': 3090.0, 'stop_mhz': 3092.0, 'step_mhz': 1.0,
               'model_lines': {'window_mhz': [2900.0, 3100.0]}}
    result = commands.cmd_sweep(build(sweep=section))
    bare = np.array(commands.cmd_sweep(build(sweep={'start_mhz': 3090.0, 'stop_mhz': 3092.0,
                                                   'step_mhz': 1.0})).rows)

    assert result.metadata['lines'] == 63
    assert np.all(np.array(result.rows)[:, 3] < bare[:, 3])


def test_saturation_knee(build):
    result = commands.cmd_saturation(build())

    assert len(result.rows) == 11
    assert abs(result.metadata['knee_dbm'] + 25.0) <= 5.0
    assert result.metadata['line_center_mhz'] == 3100.0
    peaks = [row[2] for row in result.rows]
    assert peaks == sorted(peaks)


def toy_lineshape(**extra):
    section = {
        'toy': {'gap_mhz': 3100.0, 'slope_mhz_per_tesla': 1e5},
        'sigma_b_tesla': 5e-4,
        'grid': {'start_mhz': 3099.5, 'stop_mhz': 3110.0, 'step_mhz': 0.02},
        'samples': 50_000,
    }
    section.update(extra)
    return section


def test_lineshape_is_deterministic(build):
    first = commands.cmd_lineshape(build(lineshape=toy_lineshape())).to_text()
    second = commands.cmd_lineshape(build(lineshape=toy_lineshape())).to_text()

    assert first == second
    assert '# mode_mhz=' in first


def test_lineshape_seed_changes_the_profile(build, run_document, tmp_path):
    reseeded = data_io.build_run_config(dict(run_document, lineshape=toy_lineshape()), tmp_path, seed=5)
    base = commands.cmd_lineshape(build(lineshape=toy_lineshape()))

    assert commands.cmd_lineshape(reseeded).rows != base.rows


def test_lineshape_doublet(build):
    doublet = {'toy': {'gap_mhz': 3100.0, 'slope_mhz_per_tesla': 1e5}, 'weights': [1.0, 1.0]}
    single = commands.cmd_lineshape(build(lineshape=toy_lineshape()))
    double = commands.cmd_lineshape(build(lineshape=toy_lineshape(doublet=doublet)))

    assert double.rows != single.rows
    assert double.metadata['mode_mhz'] == pytest.approx(single.metadata['mode_mhz'], abs=0.05)


def test_lineshape_needs_a_pair_for_spin_systems(build):
    section = {'sigma_b_tesla': 1e-5, 'grid': {'start_mhz': 2999.0, 'stop_mhz': 3001.0, 'step_mhz': 0.01}}
    with pytest.raises(ConfigError, match="pair"):
        commands.cmd_lineshape(build(lineshape=section))


def small_fit(**extra):
    section = {
        'observed': [{'frequency_mhz': 3010.0}],
        'free': ['site1.A_xx'],
        'window_mhz': [2900.0, 3100.0],
        'restarts': 2,
    }
    section.update(extra)
    return section


def test_fit_report_is_reproducible(build):
    first = commands.cmd_fit(build(fit=small_fit()))
    second = commands.cmd_fit(build(fit=small_fit()))

    assert first.to_text() == second.to_text()
    assert first.report['objective'] <= first.report['baseline_objective']
    assert list(first.report['parameters']) == ['site1.A_xx']
    assert first.report['observed'][0]['frequency_mhz'] == 3010.0
    assert first.rows[0][0] == 3010.0


def test_shipped_fit_reaches_the_measured_lines():
    result = commands.cmd_fit(data_io.load_run_config(CONFIG_DIR / 'run.json'))

    assert sorted(row[0] for row in result.rows) == list(LINE_CENTERS)
    assert max(abs(row[2]) for row in result.rows) < 1.0


def test_fit_rejects_unknown_parameters(build):
    with pytest.raises(ConfigError, match="unknown fit parameter 'site1.A_ww'"):
        commands.cmd_fit(build(fit=small_fit(free=['site1.A_ww'])))
    with pytest.raises(ConfigError, match=r"unknown key 'fit\.bounds_mhz\.site1\.A_yy'"):
        commands.cmd_fit(build(fit=small_fit(bounds_mhz={'site1.A_yy': [-1.0, 1.0]})))
    with pytest.raises(ConfigError, match="observed"):
        commands.cmd_fit(build(fit={'free': ['site1.A_xx'], 'window_mhz': [2900.0, 3100.0]}))


def test_budget_for_the_isotropic_line(build):
    section = {'frequency_mhz': 3000.0, 'input_power_dbm': -25.0, 'coupling_override_mhz': 0.15,
               'measured_quality_factor': 6e4}
    result = commands.cmd_budget(build(budget=section))
    values = rows_by_quantity(result)

    assert values['transition_frequency'] == pytest.approx(3000.0)
    assert 2.5e12 <= values['photon_number'] <= 1e13
    assert 1e14 / 3 <= values['population_difference'] <= 3e14
    assert 0.05 <= values['rabi_frequency'] <= 0.2
    assert 0.10 <= values['cooperativity'] <= 0.20
    assert values['vibration_sigma'] > 0
    assert result.header == ['quantity', 'value', 'unit']
    assert result.metadata['site'] == 'site1'


def test_budget_needs_a_selection(build):
    with pytest.raises(ConfigError, match="pair"):
        commands.cmd_budget(build(budget={'input_power_dbm': -25.0}))
    with pytest.raises(ConfigError, match="not both"):
        commands.cmd_budget(build(budget={'frequency_mhz': 3000.0, 'input_power_dbm': -25.0,
                                          'input_power_watts': 1e-3}))


def test_ingest_recovers_the_resonance():
    result = commands.cmd_ingest(lorentzian_csv(center=3050.0, kappa=0.03), 'bench.csv')
    frequency, peak, quality, fwhm = result.rows[0]

    assert frequency == pytest.approx(3050.0, abs=1e-6)
    assert peak == pytest.approx(0.25, rel=1e-6)
    assert quality == pytest.approx(3050.0 / 0.03, rel=1e-3)
    assert result.metadata['source'] == 'bench.csv'


def test_unknown_command(build):
    with pytest.raises(ConfigError, match="unknown command"):
        commands.run_command('plot', build())
    assert set(commands.COMMANDS) == {'levels', 'transitions', 'sweep', 'saturation', 'lineshape', 'fit',
                                      'budget'}
