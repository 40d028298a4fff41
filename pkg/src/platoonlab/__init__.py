"""Bidirectional platoon control: coupling matrices, spectra, simulation,
stability tests and scripted experiments."""

from .model import ConfigError, PlatoonConfig, Regime, build_coupling_set, classify_regime, closed_loop_matrix
from .sim import DisturbanceSpec, LeaderSpec, Metrics, PlatoonState, SimulationTrace, simulate
from .spectral import governing_sigma_min, smallest_singular_value
from .stability import Verdict, check_both, max_stable_length

__all__ = [
    "ConfigError",
    "DisturbanceSpec",
    "LeaderSpec",
    "Metrics",
    "PlatoonConfig",
    "PlatoonState",
    "Regime",
    "SimulationTrace",
    "Verdict",
    "build_coupling_set",
    "check_both",
    "classify_regime",
    "closed_loop_matrix",
    "governing_sigma_min",
    "max_stable_length",
    "simulate",
    "smallest_singular_value",
]
