"""Spectral-Galerkin feedback stabilisation of damped semilinear wave equations.

Modules:

- ``spectral``: Dirichlet eigenbases, fractional norms, multipliers, commutator scans
- ``waveop``: the damped linear wave solver and energy bookkeeping
- ``observability``: Gramians, truncated constants and the HUM control
- ``control``: interval (squeezing) controls and the Riccati feedback law
- ``nlw``: nonlinear solver, reference paths and closed-loop stabilisation
- ``cli``: the ``wavestab`` command and the staged pipeline
"""
from . import control, nlw, observability, spectral, waveop
from .config import ConfigError, ScenarioConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "control",
    "load_config",
    "nlw",
    "observability",
    "spectral",
    "waveop",
]
