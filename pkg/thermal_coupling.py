"""
Thermal populations, ion counts and the spin-cavity coupling budget.

Frequencies and couplings are in MHz (rates divided by 2*pi), everything
else in SI units.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import constants

from errors import ConfigError

logger = logging.getLogger(__name__)

# kelvin per MHz of transition frequency
KELVIN_PER_MHZ = constants.h * 1e6 / constants.k

DEFAULT_HOST_SITE_DENSITY = 1.83e28  # yttrium sites per m^3 in Y2SiO5
DEFAULT_COLD_TEMPERATURE = 0.01  # K


@dataclass(frozen=True)
class EnsembleSpec:
    dopant_fraction: float
    sample_volume: float  # m^3
    host_site_density: float = DEFAULT_HOST_SITE_DENSITY  # m^-3
    sites_per_ion_class: int = 2

    def __post_init__(self):
        if not 0 <= self.dopant_fraction < 1:
            raise ConfigError("ensemble.dopant_fraction must lie in [0, 1)")
        if self.sample_volume <= 0:
            raise ConfigError("ensemble.sample_volume must be positive")
        if self.host_site_density <= 0:
            raise ConfigError("ensemble.host_site_density must be positive")
        if self.sites_per_ion_class < 1:
            raise ConfigError("ensemble.sites_per_ion_class must be at least 1")

    @classmethod
    def cylinder(cls, diameter: float, length: float, dopant_fraction: float, **kwargs) -> 'EnsembleSpec':
        """Cylindrical sample, diameter and length in metres"""
        return cls(dopant_fraction=dopant_fraction,
                   sample_volume=math.pi * (diameter / 2) ** 2 * length, **kwargs)


@dataclass(frozen=True)
class CavityMode:
    frequency: float  # MHz
    linewidth_kappa: float  # MHz, total FWHM
    mode_volume: float  # m^3
    kappa_ext: Optional[float] = None  # MHz per port, defaults to kappa / 4
    filling_factor: float = 1.0

    def __post_init__(self):
        if self.frequency <= 0:
            raise ConfigError("cavity.frequency must be positive")
        if self.linewidth_kappa <= 0:
            raise ConfigError("cavity.linewidth_kappa must be positive")
        if self.mode_volume <= 0:
            raise ConfigError("cavity.mode_volume must be positive")
        if self.kappa_ext is None:
            object.__setattr__(self, 'kappa_ext', self.linewidth_kappa / 4)
        if not 0 < self.kappa_ext <= self.linewidth_kappa:
            raise ConfigError("cavity.kappa_ext must lie in (0, linewidth_kappa]")
        if not 0 < self.filling_factor <= 1:
            raise ConfigError("cavity.filling_factor must lie in (0, 1]")

    @property
    def quality_factor(self) -> float:
        return self.frequency / self.linewidth_kappa


@dataclass(frozen=True)
class LinkBudget:
    photon_number: float
    ion_count: float
    population_difference: float  # ions
    single_photon_field: float  # T
    single_coupling: float  # MHz
    collective_coupling: float  # MHz
    rabi_frequency: float  # MHz
    cooperativity: float
    cooling_gain: Optional[float]  # None when the warm difference vanishes
    cold_temperature: float  # K

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _energies(levels) -> np.ndarray:
    return np.asarray(getattr(levels, 'values', levels), dtype=float)


def boltzmann_populations(levels, temperature: float) -> np.ndarray:
    """Fractional populations of levels (EnergyLevels or MHz array), summing to one"""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    energies = _energies(levels)
    exponents = -(energies - energies.min()) * KELVIN_PER_MHZ / temperature
    weights = np.exp(exponents)
    return weights / weights.sum()


def ion_count(ensemble: EnsembleSpec) -> float:
    """Ions per site class"""
    return ensemble.host_site_density * ensemble.dopant_fraction * ensemble.sample_volume / ensemble.sites_per_ion_class


def _pair(transition) -> Tuple[int, int]:
    if hasattr(transition, 'lower_index'):
        return transition.lower_index, transition.upper_index
    lower, upper = transition
    return int(lower), int(upper)


def population_difference_count(total: float, levels, temperature: float, transition) -> float:
    """Ion-number difference N (p_lower - p_upper) for a Transition or (lower, upper) pair"""
    lower, upper = _pair(transition)
    populations = boltzmann_populations(levels, temperature)
    return total * float(populations[lower] - populations[upper])


def cooling_gain(levels, transition, hot: float, cold: float = DEFAULT_COLD_TEMPERATURE) -> Optional[float]:
    """Growth of the population difference when cooling from hot to cold"""
    warm = population_difference_count(1.0, levels, hot, transition)
    if warm == 0:
        return None
    return population_difference_count(1.0, levels, cold, transition) / warm


def single_photon_field(mode: CavityMode) -> float:
    """Vacuum magnetic field amplitude in tesla"""
    return math.sqrt(constants.mu_0 * constants.h * mode.frequency * 1e6 / (2 * mode.mode_volume))


def single_spin_coupling(transition, mode: CavityMode) -> float:
    """g/2pi in MHz for one spin"""
    return mode.filling_factor * transition.dipole_element * single_photon_field(mode)


def collective_coupling(transition, mode: CavityMode, population_difference: float) -> float:
    """sqrt(N) g/2pi in MHz"""
    if population_difference < 0:
        raise ConfigError("population difference must be non-negative")
    return math.sqrt(population_difference) * single_spin_coupling(transition, mode)


def dbm_to_watts(power_dbm: float) -> float:
    return 1e-3 * 10 ** (power_dbm / 10)


def watts_to_dbm(power_watts: float) -> float:
    return 10 * math.log10(power_watts / 1e-3)


def photon_number(mode: CavityMode, power: float, coupling_correction: float = 1.0) -> float:
    """
    Intracavity photon number at resonance for an input power in watts.

    Uses the stored energy U = P Q / omega of a resonant, fully transmitting
    cavity; coupling_correction rescales it for other coupling configurations.
    """
    if power < 0:
        raise ConfigError("input power must be non-negative")
    omega = 2 * math.pi * mode.frequency * 1e6
    return coupling_correction * power * mode.quality_factor / (constants.hbar * omega ** 2)


def rabi_frequency(single_coupling: float, photons: float) -> float:
    """Omega/2pi in MHz"""
    if photons < 0:
        raise ConfigError("photon number must be non-negative")
    return 2 * single_coupling * math.sqrt(photons)


def cooperativity(coupling: float, kappa: float, gamma_star: float) -> float:
    """(sqrt(N) g)^2 / (kappa Gamma*), all in MHz"""
    return coupling ** 2 / (kappa * gamma_star)


def link_budget(mode: CavityMode, ensemble: EnsembleSpec, levels, transition, temperature: float,
                power: float, gamma_star: float, coupling_override: Optional[float] = None,
                cold: float = DEFAULT_COLD_TEMPERATURE, coupling_correction: float = 1.0) -> LinkBudget:
    """
    Photon, population, coupling and Rabi budget for one transition.

    When coupling_override (sqrt(N) g/2pi, MHz) is given, the single-spin
    coupling is inferred from it instead of from the dipole element.
    """
    total = ion_count(ensemble)
    difference = population_difference_count(total, levels, temperature, transition)
    field = single_photon_field(mode)
    if coupling_override is None:
        single = single_spin_coupling(transition, mode)
        collective = math.sqrt(max(difference, 0.0)) * single
    else:
        collective = coupling_override
        single = collective / math.sqrt(difference) if difference > 0 else 0.0
    photons = photon_number(mode, power, coupling_correction)
    budget = LinkBudget(
        photon_number=photons,
        ion_count=total,
        population_difference=difference,
        single_photon_field=field,
        single_coupling=single,
        collective_coupling=collective,
        rabi_frequency=rabi_frequency(single, photons),
        cooperativity=cooperativity(collective, mode.linewidth_kappa, gamma_star),
        cooling_gain=cooling_gain(levels, transition, temperature, cold),
        cold_temperature=cold,
    )
    logger.debug("link budget: %s", budget)
    return budget
