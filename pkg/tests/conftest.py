"""Shared scenarios.

``small`` is an 8-mode window problem with a smooth time-varying potential,
cheap enough for unit tests.  ``default`` is the full default-cubic scenario
run through every stage before the closed loop; acceptance tests reuse it.
"""
from dataclasses import dataclass

import numpy as np
import pytest

from wavestab import cli, config
from wavestab.spectral import build_basis, collar_cutoff, interval
from wavestab.waveop import PotentialField, TimeGrid, default_dt


@dataclass
class Small:
    basis: object
    chi: object
    T: float
    grid: TimeGrid
    b: PotentialField
    gamma: float = 0.1
    sigma: float = 0.5
    m: int = 5
    N: int = 4
    delta_pen: float = 1e-4


def small_potential(t, x):
    return 1.5 + np.sin(0.7 * t) * np.cos(x[:, 0]) + 0.5 * np.sin(x[:, 0]) ** 2


@pytest.fixture(scope="session")
def small():
    basis = build_basis(interval(), 8)
    T = 2.5 * basis.domain.t_min
    grid = TimeGrid.covering(T, default_dt(basis))
    # long enough for four windows plus a Riccati tail
    times = np.linspace(0.0, 4 * T + 120.0, 1601)
    b = PotentialField.from_function(basis, small_potential, times)
    return Small(basis, collar_cutoff(basis), T, grid, b)


@pytest.fixture(scope="session")
def default_run():
    """Scenario after basis through riccati on the default configuration."""
    cfg = config.load_config(preset="default-cubic")
    sc = cli.Scenario(cfg)
    stages = ("basis", "reference", "linearise", "observability", "select_m", "synthesize", "riccati")
    rep = cli.run_pipeline(cfg, stages, scenario=sc)
    return sc, rep
