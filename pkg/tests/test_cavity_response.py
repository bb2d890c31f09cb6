import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies
from scipy.integrate import trapezoid

import cavity_response
from cavity_response import EnsembleLine, SaturationPoint, SweepResult, TuningCalibration
from errors import ConfigError, DataError
from lineshape import LineProfile
from thermal_coupling import CavityMode, cooperativity


def test_bare_cavity_peak(loop_gap_mode):
    sweep = cavity_response.transmission([loop_gap_mode.frequency], loop_gap_mode)
    assert sweep.s21_squared[0] == pytest.approx(0.25)


def test_on_resonance_suppression_matches_cooperativity():
    mode = CavityMode(frequency=3100.0, linewidth_kappa=0.03, mode_volume=3e-7)
    line = EnsembleLine(center=3100.0, width_gamma_star=5.0, coupling=0.15)
    c = cooperativity(0.15, 0.03, 5.0)

    bare = cavity_response.transmission([3100.0], mode).s21_squared[0]
    loaded = cavity_response.transmission([3100.0], mode, [line]).s21_squared[0]

    assert 0.10 <= c <= 0.20
    assert loaded / bare == pytest.approx((1 + c) ** -2, abs=1e-6)


def test_q_extraction_of_bare_cavity():
    mode = CavityMode(frequency=3050.0, linewidth_kappa=0.030, mode_volume=3e-7)
    grid = cavity_response.resonance_grid(mode, span_linewidths=20, points_per_linewidth=20)
    peak = cavity_response.extract_peak(cavity_response.transmission(grid, mode))

    assert 0.87e5 <= peak.quality_factor <= 1.17e5
    assert peak.quality_factor == pytest.approx(mode.quality_factor, rel=1e-3)
    assert peak.peak_frequency == pytest.approx(3050.0, abs=1e-6)
    assert peak.fwhm == pytest.approx(0.030, rel=1e-3)


def test_pulling_sign_and_magnitude(loop_gap_mode):
    above = EnsembleLine(center=loop_gap_mode.frequency + 2.5, width_gamma_star=5.0, coupling=0.15)
    below = EnsembleLine(center=loop_gap_mode.frequency - 2.5, width_gamma_star=5.0, coupling=0.15)

    shift = cavity_response.cavity_pulling(loop_gap_mode, [above])
    assert shift == pytest.approx(-(0.15 / 2) ** 2 * 2.5 / (2.5 ** 2 + 2.5 ** 2), rel=1e-9)
    assert abs(shift) <= 0.01
    assert cavity_response.cavity_pulling(loop_gap_mode, [above, below]) == pytest.approx(0.0, abs=1e-15)


def test_pulling_uses_the_half_splitting_rate(loop_gap_mode):
    below = EnsembleLine(center=loop_gap_mode.frequency - 2.5, width_gamma_star=5.0, coupling=0.15)

    assert cavity_response.cavity_pulling(loop_gap_mode, [below]) == pytest.approx(1.125e-3, rel=1e-9)


@pytest.mark.parametrize('detuning', [2.5, 5.0, 20.0, -7.5])
def test_pulling_stays_at_kilohertz_scale(loop_gap_mode, detuning):
    line = EnsembleLine(center=loop_gap_mode.frequency + detuning, width_gamma_star=5.0, coupling=0.15)
    assert abs(cavity_response.cavity_pulling(loop_gap_mode, [line])) <= 0.01


def test_pulling_moves_the_simulated_peak(loop_gap_mode):
    line = EnsembleLine(center=loop_gap_mode.frequency + 2.5, width_gamma_star=5.0, coupling=0.15)
    grid = cavity_response.resonance_grid(loop_gap_mode, span_linewidths=4, points_per_linewidth=200)
    peak = cavity_response.extract_peak(cavity_response.transmission(grid, loop_gap_mode, [line]))

    expected = loop_gap_mode.frequency + cavity_response.cavity_pulling(loop_gap_mode, [line])
    assert peak.peak_frequency == pytest.approx(expected, abs=1e-4)


def test_line_order_does_not_matter(loop_gap_mode):
    lines = [EnsembleLine(3090.0 + 3 * k, 5.0, 0.1 + 0.02 * k) for k in range(5)]
    grid = cavity_response.resonance_grid(loop_gap_mode)
    forward = cavity_response.transmission(grid, loop_gap_mode, lines).s21_squared
    backward = cavity_response.transmission(grid, loop_gap_mode, lines[::-1]).s21_squared

    np.testing.assert_array_equal(forward, backward)


def test_custom_profile_line_matches_lorentzian_far_from_resonance(loop_gap_mode):
    center = loop_gap_mode.frequency + 20.0
    nu = center + 0.005 * np.arange(-200, 201)
    density = np.exp(-0.5 * ((nu - center) / 0.05) ** 2)
    profile = LineProfile.normalized(nu, density)

    custom = EnsembleLine(center, 0.1, 0.15, profile=profile)
    lorentzian = EnsembleLine(center, 0.1, 0.15)
    grid = cavity_response.resonance_grid(loop_gap_mode)

    np.testing.assert_allclose(cavity_response.transmission(grid, loop_gap_mode, [custom]).s21_squared,
                               cavity_response.transmission(grid, loop_gap_mode, [lorentzian]).s21_squared,
                               rtol=1e-3)
    assert custom.shape == 'custom'
    assert custom.homogeneous_width == pytest.approx(0.001)


def test_transmission_rejects_bad_grids(loop_gap_mode):
    with pytest.raises(ConfigError, match="ascending"):
        cavity_response.transmission([3100.0, 3099.0], loop_gap_mode)
    with pytest.raises(ConfigError):
        cavity_response.transmission([], loop_gap_mode)


def test_line_validation():
    with pytest.raises(ConfigError):
        EnsembleLine(3100.0, 0.0, 0.1)
    with pytest.raises(ConfigError):
        EnsembleLine(3100.0, 5.0, -0.1)


def test_extract_peak_errors():
    frequencies = np.linspace(3000.0, 3001.0, 11)
    with pytest.raises(DataError, match="bracketed"):
        cavity_response.extract_peak(SweepResult(frequencies, np.linspace(0.0, 1.0, 11)))
    with pytest.raises(DataError, match="half-maximum"):
        cavity_response.extract_peak(SweepResult(frequencies, 1.0 - 0.01 * (frequencies - 3000.5) ** 2))
    with pytest.raises(DataError):
        SweepResult([1.0, 2.0], [0.5, -0.1])


def test_vibration_average_lowers_q(loop_gap_mode):
    grid = cavity_response.resonance_grid(loop_gap_mode)
    bare = cavity_response.transmission(grid, loop_gap_mode)

    assert cavity_response.vibration_average(bare, 0.0) is bare
    jittered = cavity_response.vibration_average(bare, 0.01)
    assert jittered.metadata['jitter_sigma_mhz'] == 0.01
    assert cavity_response.extract_peak(jittered).quality_factor < cavity_response.extract_peak(bare).quality_factor
    assert jittered.s21_squared.max() < bare.s21_squared.max()
    with pytest.raises(ConfigError):
        cavity_response.vibration_average(bare, -1.0)


def test_vibration_average_gives_a_voigt_width():
    mode = CavityMode(frequency=3100.0, linewidth_kappa=0.03, mode_volume=3e-7)
    grid = 3100.0 + 0.0005 * np.arange(-2000, 2001)
    bare = cavity_response.transmission(grid, mode)
    jittered = cavity_response.vibration_average(bare, 0.02)

    lorentz, gauss = 0.03, 2 * math.sqrt(2 * math.log(2)) * 0.02
    voigt = 0.5346 * lorentz + math.sqrt(0.2166 * lorentz ** 2 + gauss ** 2)
    assert cavity_response.extract_peak(jittered).fwhm == pytest.approx(voigt, rel=0.02)
    assert trapezoid(jittered.s21_squared, grid) == pytest.approx(trapezoid(bare.s21_squared, grid), rel=0.005)


def test_bare_cavity_area(loop_gap_mode):
    kappa = loop_gap_mode.linewidth_kappa
    grid = loop_gap_mode.frequency + (kappa / 50) * np.arange(-2500, 2501)
    sweep = cavity_response.transmission(grid, loop_gap_mode)

    expected = math.pi * loop_gap_mode.kappa_ext ** 2 * 2 / kappa
    assert trapezoid(sweep.s21_squared, grid) == pytest.approx(expected, rel=0.01)


def test_vibration_sigma_inverts_the_jitter_model(loop_gap_mode):
    measured_q = 6e4
    sigma = cavity_response.vibration_sigma_for_q(loop_gap_mode, measured_q)

    width = loop_gap_mode.frequency / measured_q
    grid = loop_gap_mode.frequency + (width / 40) * np.arange(-1600, 1601)
    jittered = cavity_response.vibration_average(cavity_response.transmission(grid, loop_gap_mode), sigma)
    assert sigma > 0
    assert cavity_response.extract_peak(jittered).quality_factor == pytest.approx(measured_q, rel=0.01)
    assert cavity_response.vibration_sigma_for_q(loop_gap_mode, 1e5) == 0.0


def saturation_line(mode, c=0.15):
    coupling = math.sqrt(c * mode.linewidth_kappa * 5.0)
    return EnsembleLine(center=mode.frequency, width_gamma_star=5.0, coupling=coupling)


def test_saturation_morphology(loop_gap_mode):
    powers = np.arange(-60.0, -9.0, 5.0)
    points = cavity_response.saturation_sweep(powers, loop_gap_mode, saturation_line(loop_gap_mode), 5e12)

    peaks = np.array([p.peak_value for p in points])
    qs = np.array([p.quality_factor for p in points])
    assert np.all(np.diff(peaks) >= -1e-12)
    assert np.all(np.diff(qs) >= -1e-6 * qs.max())
    assert abs(cavity_response.saturation_knee(points) + 25.0) <= 5.0
    assert [p.power_dbm for p in points] == powers.tolist()


def test_saturation_is_thread_independent(loop_gap_mode):
    powers = [-40.0, -30.0, -20.0]
    line = saturation_line(loop_gap_mode)
    single = cavity_response.saturation_sweep(powers, loop_gap_mode, line, 5e12, threads=1)
    pooled = cavity_response.saturation_sweep(powers, loop_gap_mode, line, 5e12, threads=3)

    assert single == pooled


def test_detuned_reference_line_barely_saturates(loop_gap_mode):
    line = EnsembleLine(center=loop_gap_mode.frequency + 40.0, width_gamma_star=5.0, coupling=0.15)
    points = cavity_response.saturation_sweep([-60.0, -10.0], loop_gap_mode, line, 5e12)

    assert points[1].peak_value == pytest.approx(points[0].peak_value, rel=5e-3)


def test_knee_uses_linear_peak_transmission():
    # in dB the largest bend would sit at -50 dBm
    peaks = [0.01, 0.01, 0.02, 0.04, 0.08]
    points = [SaturationPoint(-60.0 + 10 * k, 0.0, peak, 1e4) for k, peak in enumerate(peaks)]

    assert cavity_response.saturation_knee(points) == -30.0


def test_knee_input_validation():
    points = [SaturationPoint(p, 0.0, 0.1, 1e4) for p in (-60.0, -50.0, -35.0)]
    with pytest.raises(DataError, match="uniform"):
        cavity_response.saturation_knee(points)
    with pytest.raises(ConfigError):
        cavity_response.saturation_knee(points[:2])
    with pytest.raises(ConfigError):
        cavity_response.saturation_sweep([-30.0], CavityMode(3100.0, 0.03, 3e-7),
                                         EnsembleLine(3100.0, 5.0, 0.1), 0.0)


def test_tuning_calibration_round_trip(caplog):
    calibration = TuningCalibration.from_step(30.0, 0.1, reference_gap=0.5, reference_frequency=3100.0)
    assert calibration.slope == pytest.approx(0.1 / 30e-6)

    frequency = cavity_response.gap_to_frequency(calibration, 0.52)
    assert cavity_response.frequency_to_gap(calibration, frequency) == pytest.approx(0.52)

    steps = cavity_response.actuator_frequencies(calibration, 0.5, 5)
    np.testing.assert_allclose(np.diff(steps), 0.1, rtol=1e-6)
    assert not caplog.records

    with caplog.at_level(logging.WARNING, logger='cavity_response'):
        cavity_response.gap_to_frequency(calibration, 1.0)
    assert 'outside the tuning range' in caplog.text


def test_tuning_validation():
    with pytest.raises(ConfigError):
        TuningCalibration.from_step(0.0, 0.1, 0.5, 3100.0)
    with pytest.raises(ConfigError):
        TuningCalibration(slope=-1.0, reference_gap=0.5, reference_frequency=3100.0)


@settings(max_examples=30, deadline=None)
@given(c=strategies.floats(min_value=0.0, max_value=5.0))
def test_suppression_law_holds_for_any_cooperativity(c):
    mode = CavityMode(frequency=3000.0, linewidth_kappa=0.05, mode_volume=1e-7)
    coupling = math.sqrt(c * 0.05 * 4.0)
    line = EnsembleLine(center=3000.0, width_gamma_star=4.0, coupling=coupling)

    bare = cavity_response.transmission([3000.0], mode).s21_squared[0]
    loaded = cavity_response.transmission([3000.0], mode, [line]).s21_squared[0]
    assert loaded / bare == pytest.approx((1 + c) ** -2, rel=1e-9)
