import json
import math

import numpy as np
import pytest

from wavestab.spectral import ModalState, build_basis, interval
from wavestab.waveop import (
    ModeFlow,
    PotentialField,
    TimeGrid,
    default_dt,
    duhamel,
    energy,
    energy_balance_residual,
    free_propagate,
    modified_energy,
    propagator_matrix,
    solve_linear,
)


@pytest.fixture(scope="module")
def b1():
    return build_basis(interval(), 1)


@pytest.fixture(scope="module")
def b8():
    return build_basis(interval(), 8)


def random_state(basis, seed):
    rng = np.random.default_rng(seed)
    return ModalState.from_vector(basis, rng.standard_normal(2 * basis.n_modes))


def test_free_harmonic_mode(b1):
    s = free_propagate(ModalState.mode(b1, 1), 1.7, 0.0)
    assert s.v[0] == pytest.approx(math.cos(1.7), abs=1e-14)
    assert s.vdot[0] == pytest.approx(-math.sin(1.7), abs=1e-14)


def test_free_identity_at_zero(b8):
    s = random_state(b8, 0)
    assert np.allclose(free_propagate(s, 0.0, 0.3).vector, s.vector, atol=1e-15)


def test_critical_damping_closed_form(b1):
    t = np.linspace(0, 5, 11)
    got = [free_propagate(ModalState.mode(b1, 1), tt, 2.0).v[0] for tt in t]
    assert np.allclose(got, (1 + t) * np.exp(-t), atol=1e-12)


def test_critical_damping_against_ode_integration(b1):
    from scipy.integrate import solve_ivp

    sol = solve_ivp(lambda t, y: [y[1], -2 * y[1] - y[0]], (0, 3), [1, 0], rtol=1e-12, atol=1e-14)
    s = free_propagate(ModalState.mode(b1, 1), 3.0, 2.0)
    assert s.v[0] == pytest.approx(sol.y[0, -1], abs=1e-9)


@pytest.mark.parametrize("gamma", [0.0, 0.3, 2.0, 5.0, -0.2])
def test_semigroup_property(b8, gamma):
    s = random_state(b8, 1)
    a = free_propagate(free_propagate(s, 0.7, gamma), 1.1, gamma)
    assert np.allclose(a.vector, free_propagate(s, 1.8, gamma).vector, atol=1e-10)


def test_undamped_energy_conserved(b8):
    s = random_state(b8, 2)
    E0 = energy(s)
    for t in (0.5, 3.0, 40.0):
        assert abs(energy(free_propagate(s, t, 0.0)) - E0) <= 1e-10 * E0


def test_damped_energy_decreases_and_modified_energy_monotone(b8):
    gamma = 0.4
    s = random_state(b8, 3)
    grid = TimeGrid.covering(10.0, default_dt(b8))
    tr = solve_linear(None, None, s, gamma, grid)
    assert np.all(np.diff(tr.energies) < 0)
    alpha = min(gamma, math.sqrt(b8.eigenvalues[0])) / 2
    Em = [modified_energy(tr.state(i), alpha) for i in range(len(tr.states))]
    assert np.all(np.diff(Em) < 0)


def test_duhamel_zero_forcing(b8):
    grid = TimeGrid.covering(2.0, 0.01)
    tr = duhamel(np.zeros((grid.n_steps + 1, 8)), 0.1, grid, b8)
    assert not np.any(tr.states)


def test_duhamel_constant_forcing_second_order(b1):
    errs = []
    for dt in (0.1, 0.05, 0.025):
        grid = TimeGrid.covering(4.0, dt)
        tr = duhamel(np.ones((grid.n_steps + 1, 1)), 0.0, grid, b1)
        errs.append(np.max(np.abs(tr.states[:, 0] - (1 - np.cos(grid.times)))))
    assert errs[-1] < 1e-3
    assert errs[0] / errs[1] >= 3.5 or errs[0] < 1e-13


def test_duhamel_superposition(b8):
    grid = TimeGrid.covering(1.0, 0.01)
    rng = np.random.default_rng(4)
    g1, g2 = rng.standard_normal((2, grid.n_steps + 1, 8))
    a = duhamel(g1, 0.2, grid, b8).states + duhamel(g2, 0.2, grid, b8).states
    assert np.allclose(a, duhamel(g1 + g2, 0.2, grid, b8).states, atol=1e-12)


def test_duhamel_shape_check(b8):
    grid = TimeGrid.covering(1.0, 0.1)
    with pytest.raises(ValueError):
        duhamel(np.zeros((3, 8)), 0.0, grid, b8)


def test_solve_linear_matches_free_flow(b8):
    s = random_state(b8, 5)
    grid = TimeGrid.covering(3.0, default_dt(b8))
    tr = solve_linear(None, None, s, 0.2, grid)
    for i in (0, 17, grid.n_steps):
        assert np.allclose(tr.states[i], free_propagate(s, grid.times[i], 0.2).vector, atol=1e-12)


def test_constant_potential_shifts_spectrum(b1):
    errs = []
    for dt in (0.02, 0.01):
        grid = TimeGrid.covering(5.0, dt)
        tr = solve_linear(PotentialField.constant(b1, 3.0), None, ModalState.mode(b1, 1), 0.0, grid)
        errs.append(np.max(np.abs(tr.states[:, 0] - np.cos(2 * grid.times))))
    assert errs[1] < 5 * 0.01**2
    assert errs[0] / errs[1] > 3.5


def test_cancellation_control_recovers_free_flow(b8):
    grid = TimeGrid.covering(2.0, default_dt(b8))
    b = PotentialField.from_node_values(b8, grid.times, np.outer(1 + 0.5 * np.sin(grid.times), b8.quad_nodes[:, 0]))
    s = random_state(b8, 7)
    free = np.array([free_propagate(s, t, 0.1).vector for t in grid.times])
    eta = np.array([b.matrix_at(t) @ free[k, :8] for k, t in enumerate(grid.times)])
    tr = solve_linear(b, eta, s, 0.1, grid)
    assert np.max(np.abs(tr.states - free)) < 1e-4 * np.max(np.abs(free))


def test_energy_examples(b1):
    assert energy(ModalState.mode(b1, 1)) == 1.0
    assert energy(ModalState.mode(b1, 1, velocity=True)) == 1.0
    assert energy(ModalState.zeros(b1)) == 0.0


def test_modified_energy_examples(b1, b8):
    s = ModalState.mode(b1, 1) + ModalState.mode(b1, 1, velocity=True)
    assert modified_energy(s, 1.0) == pytest.approx(3.0)
    r = random_state(b8, 8)
    assert modified_energy(r, 0.0) == energy(r)


def test_modified_energy_equivalence_sampled(b8):
    rng = np.random.default_rng(9)
    alpha = 0.5
    for _ in range(500):
        s = ModalState.from_vector(b8, rng.standard_normal(16) * rng.exponential(1, 16))
        E, Em = energy(s), modified_energy(s, alpha)
        assert (1 - alpha / 2) * E <= Em + 1e-12 <= (1 + alpha / 2) * E + 2e-12


def test_energy_balance_conservative(b8):
    grid = TimeGrid.covering(5.0, default_dt(b8))
    tr = solve_linear(None, None, random_state(b8, 10), 0.0, grid)
    assert energy_balance_residual(tr, None, None, 0.0) < 1e-3


def test_energy_balance_refinement(b8):
    s = random_state(b8, 11)
    res = []
    for dt in (0.01, 0.005):
        grid = TimeGrid.covering(2.0, dt)
        b = PotentialField.from_function(b8, lambda t, x: 1 + np.cos(t) * x[:, 0], grid.times)
        eta = np.outer(np.sin(grid.times), np.full(8, 0.3))
        tr = solve_linear(b, eta, s, 0.3, grid)
        res.append(energy_balance_residual(tr, b, eta, 0.3))
    assert res[0] / res[1] >= 3.5


def test_damped_single_mode_balance(b1):
    grid = TimeGrid.covering(5.0, 0.01)
    tr = solve_linear(None, None, ModalState.mode(b1, 1), 0.5, grid)
    assert np.all(np.diff(tr.energies) <= 0)
    assert energy_balance_residual(tr, None, None, 0.5) < 1e-4


def test_linearity_in_init_and_eta(b8):
    grid = TimeGrid.covering(1.5, default_dt(b8))
    b = PotentialField.from_function(b8, lambda t, x: 2 + np.sin(3 * t) * np.cos(x[:, 0]), grid.times)
    rng = np.random.default_rng(12)
    e1, e2 = rng.standard_normal((2, grid.n_steps + 1, 8))
    s1, s2 = random_state(b8, 13), random_state(b8, 14)
    lhs = solve_linear(b, e1 + 2 * e2, s1 + 2 * s2, 0.1, grid).states
    rhs = solve_linear(b, e1, s1, 0.1, grid).states + 2 * solve_linear(b, e2, s2, 0.1, grid).states
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(lhs)))


def test_a_priori_bound_stable_under_refinement(b8):
    # M = sup |Phi(t)|_{-sigma} / (|Phi(0)|_{-sigma} + sum dt |eta|_{-sigma-1}), sigma = 0.5
    sigma = 0.5
    lam = b8.eigenvalues
    w = np.concatenate([lam**-sigma, lam ** (-sigma - 1)])
    s = random_state(b8, 15)
    Ms = []
    for dt in (0.01, 0.005):
        grid = TimeGrid.covering(4.0, dt)
        b = PotentialField.from_function(b8, lambda t, x: 1.5 * np.sin(t + x[:, 0]), grid.times)
        eta = np.outer(np.cos(grid.times), np.ones(8))
        tr = solve_linear(b, eta, s, 0.1, grid)
        sup = np.max(np.sqrt(tr.states**2 @ w))
        src = math.sqrt(np.sum(w * s.vector**2)) + np.sum(dt * np.sqrt((eta**2) @ lam ** (-sigma - 1)))
        Ms.append(sup / src)
    assert abs(Ms[0] - Ms[1]) <= 0.01 * Ms[1]


def test_mismatched_basis_rejected(b8):
    other = build_basis(interval(), 8)
    grid = TimeGrid.covering(1.0, 0.1)
    with pytest.raises(ValueError):
        solve_linear(PotentialField.constant(other, 1.0), None, random_state(b8, 0), 0.0, grid)


def test_potential_must_cover_grid(b8):
    grid = TimeGrid.covering(2.0, 0.1)
    short = PotentialField.from_function(b8, lambda t, x: x[:, 0], np.linspace(0, 1, 5))
    with pytest.raises(ValueError):
        solve_linear(short, None, random_state(b8, 0), 0.0, grid)


def test_potential_matrices_symmetric_and_bound(b8):
    b = PotentialField.from_function(b8, lambda t, x: np.sin(t) * x[:, 0] ** 2, np.linspace(0, 1, 4))
    for M in b.matrices:
        assert np.allclose(M, M.T)
    assert b.bound >= max(np.linalg.norm(M, 2) for M in b.matrices) - 1e-12


def test_instability_flag(b1):
    grid = TimeGrid.covering(5.0, 0.01)
    stable = solve_linear(PotentialField.constant(b1, 0.5), None, ModalState.mode(b1, 1), 0.1, grid)
    assert stable.meta["unstable"] is False


def test_trace_csv_and_sidecar(tmp_path, b8):
    grid = TimeGrid.covering(0.5, 0.05)
    tr = solve_linear(None, None, random_state(b8, 16), 0.1, grid)
    path = tmp_path / "trace.csv"
    tr.to_csv(path, modes=True)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["t", "E", "H0_norm"]
    assert len(header) == 3 + 16
    meta = json.loads((tmp_path / "trace.csv.json").read_text())
    assert meta["scheme"] == "exponential-trapezoid"


def test_mode_flow_matrix_matches_apply(b8):
    fl = ModeFlow(b8.eigenvalues, 0.3, 0.2)
    x = random_state(b8, 17).vector
    assert np.allclose(fl.matrix() @ x, fl.apply(x))


def test_propagator_matrix_is_linear_map(b8):
    grid = TimeGrid.covering(1.0, default_dt(b8))
    P = propagator_matrix(None, 0.1, grid, b8)
    s = random_state(b8, 18)
    assert np.allclose(P @ s.vector, free_propagate(s, 1.0, 0.1).vector, atol=1e-12)
