import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies
from scipy import constants

import spin_model
import thermal_coupling
from errors import ConfigError
from thermal_coupling import CavityMode, EnsembleSpec


def test_populations_are_normalized_and_ordered(generic_system):
    levels = spin_model.zero_field_levels(generic_system)
    populations = thermal_coupling.boltzmann_populations(levels, 5.1)

    assert populations.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(populations) <= 0)


def test_populations_accept_plain_energies():
    populations = thermal_coupling.boltzmann_populations(np.array([0.0, 0.0]), 1.0)
    np.testing.assert_allclose(populations, [0.5, 0.5])
    with pytest.raises(ConfigError):
        thermal_coupling.boltzmann_populations(np.array([0.0, 1.0]), -1.0)


def test_cylinder_ion_count(yso_ensemble):
    volume = math.pi * (4.95e-3 / 2) ** 2 * 12e-3
    assert yso_ensemble.sample_volume == pytest.approx(volume)
    assert thermal_coupling.ion_count(yso_ensemble) == pytest.approx(1.83e28 * 50e-6 * volume / 2)


def test_population_budget_order_of_magnitude(isotropic_system, yso_ensemble):
    levels = spin_model.zero_field_levels(isotropic_system)
    total = thermal_coupling.ion_count(yso_ensemble)
    difference = thermal_coupling.population_difference_count(total, levels, 5.1, (0, 7))

    assert 1e14 / 3 <= difference <= 3e14


def test_photon_budget(loop_gap_mode):
    photons = thermal_coupling.photon_number(loop_gap_mode, thermal_coupling.dbm_to_watts(-25.0))

    assert 2.5e12 <= photons <= 1e13
    assert photons == pytest.approx(7.11e12, rel=0.01)


def test_photon_number_coupling_correction(loop_gap_mode):
    power = 1e-6
    base = thermal_coupling.photon_number(loop_gap_mode, power)
    assert thermal_coupling.photon_number(loop_gap_mode, power, coupling_correction=0.25) == pytest.approx(base / 4)
    with pytest.raises(ConfigError):
        thermal_coupling.photon_number(loop_gap_mode, -1.0)


def test_rabi_budget():
    single = 0.15 / math.sqrt(1e14)
    rabi = thermal_coupling.rabi_frequency(single, 5e12)

    assert 0.05 <= rabi <= 0.2


def test_cooperativity_budget():
    assert thermal_coupling.cooperativity(0.15, 0.03, 5.0) == pytest.approx(0.15)


def test_cooling_gain_bracket():
    levels = np.concatenate([[0.0], np.linspace(3000.0, 3600.0, 15)])
    gain = thermal_coupling.cooling_gain(levels, (0, 1), hot=5.1, cold=0.01)

    assert 300 <= gain <= 600


def test_cooling_gain_of_a_degenerate_pair():
    levels = np.array([0.0, 0.0, 3000.0])

    assert thermal_coupling.cooling_gain(levels, (0, 1), hot=5.1) is None


def test_single_photon_field_formula(loop_gap_mode):
    expected = math.sqrt(constants.mu_0 * constants.h * 3.1e9 / (2 * 3e-7))
    assert thermal_coupling.single_photon_field(loop_gap_mode) == pytest.approx(expected)


def test_single_spin_coupling_includes_filling_factor(generic_system, loop_gap_mode):
    levels = spin_model.zero_field_levels(generic_system)
    transition = max(spin_model.enumerate_transitions(levels, generic_system), key=lambda t: t.dipole_element)
    full = CavityMode(loop_gap_mode.frequency, loop_gap_mode.linewidth_kappa, loop_gap_mode.mode_volume)

    ratio = (thermal_coupling.single_spin_coupling(transition, loop_gap_mode)
             / thermal_coupling.single_spin_coupling(transition, full))
    assert ratio == pytest.approx(0.5)


def test_collective_coupling_rejects_negative_population(generic_system, loop_gap_mode):
    levels = spin_model.zero_field_levels(generic_system)
    transition = spin_model.enumerate_transitions(levels, generic_system)[0]
    with pytest.raises(ConfigError):
        thermal_coupling.collective_coupling(transition, loop_gap_mode, -1.0)


def test_power_conversions():
    assert thermal_coupling.dbm_to_watts(0.0) == pytest.approx(1e-3)
    assert thermal_coupling.dbm_to_watts(-30.0) == pytest.approx(1e-6)
    assert thermal_coupling.watts_to_dbm(1e-3) == pytest.approx(0.0, abs=1e-12)


def test_link_budget_with_coupling_override(isotropic_system, loop_gap_mode, yso_ensemble):
    levels = spin_model.zero_field_levels(isotropic_system)
    transition = next(t for t in spin_model.enumerate_transitions(levels, isotropic_system)
                      if (t.lower_index, t.upper_index) == (0, 7))
    budget = thermal_coupling.link_budget(loop_gap_mode, yso_ensemble, levels, transition, 5.1,
                                          thermal_coupling.dbm_to_watts(-25.0), gamma_star=5.0,
                                          coupling_override=0.15)

    assert budget.collective_coupling == 0.15
    assert budget.single_coupling == pytest.approx(0.15 / math.sqrt(budget.population_difference))
    assert 0.05 <= budget.rabi_frequency <= 0.2
    assert 0.10 <= budget.cooperativity <= 0.20
    assert budget.cold_temperature == thermal_coupling.DEFAULT_COLD_TEMPERATURE
    assert set(budget.as_dict()) >= {'photon_number', 'rabi_frequency', 'cooperativity'}


def test_ensemble_validation():
    with pytest.raises(ConfigError, match="dopant_fraction"):
        EnsembleSpec(dopant_fraction=1.5, sample_volume=1e-7)
    with pytest.raises(ConfigError, match="sample_volume"):
        EnsembleSpec(dopant_fraction=1e-5, sample_volume=0.0)


def test_cavity_defaults_and_validation():
    mode = CavityMode(frequency=3000.0, linewidth_kappa=0.04, mode_volume=1e-7)
    assert mode.kappa_ext == pytest.approx(0.01)
    assert mode.quality_factor == pytest.approx(75000.0)
    with pytest.raises(ConfigError, match="kappa_ext"):
        CavityMode(frequency=3000.0, linewidth_kappa=0.04, mode_volume=1e-7, kappa_ext=0.05)


@settings(max_examples=50)
@given(power=strategies.floats(min_value=1e-12, max_value=1e-2),
       factor=strategies.floats(min_value=0.1, max_value=10.0))
def test_photon_number_is_linear_in_power(power, factor):
    mode = CavityMode(frequency=3100.0, linewidth_kappa=0.0344, mode_volume=3e-7)
    scaled = thermal_coupling.photon_number(mode, factor * power)
    assert scaled == pytest.approx(factor * thermal_coupling.photon_number(mode, power), rel=1e-12)


@settings(max_examples=50)
@given(coupling=strategies.floats(min_value=1e-3, max_value=10.0),
       factor=strategies.floats(min_value=0.1, max_value=10.0))
def test_cooperativity_scales_with_coupling_squared(coupling, factor):
    base = thermal_coupling.cooperativity(coupling, 0.03, 5.0)
    assert thermal_coupling.cooperativity(factor * coupling, 0.03, 5.0) == pytest.approx(factor ** 2 * base)
