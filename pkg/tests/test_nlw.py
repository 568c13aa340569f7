import math

import numpy as np
import pytest

from wavestab.control import design_beta, riccati_value
from wavestab.nlw import (
    ForcingField,
    Nonlinearity,
    NonlinearityError,
    ReferencePath,
    closed_loop,
    collocation_for,
    find_epsilon,
    linearize,
    nonlinearity_from_spec,
    picard_probe,
    random_perturbations,
    reference_trajectory,
    solve_nlw,
    validate_nonlinearity,
    z_norm,
)
from wavestab.spectral import ModalState, build_basis, collar_cutoff, interval, mult_operator_matrix
from wavestab.waveop import TimeGrid, default_dt, solve_linear, stacked_energy


@pytest.fixture(scope="module")
def b8():
    return build_basis(interval(), 8)


def state(basis, pos=(), vel=()):
    v = np.zeros(2 * basis.n_modes)
    for j, a in pos:
        v[j - 1] = a
    for j, a in vel:
        v[basis.n_modes + j - 1] = a
    return ModalState.from_vector(basis, v)


# ---------------------------------------------------------------- nonlinearity


def test_validate_cubic_passes():
    cert = validate_nonlinearity(Nonlinearity.cubic())
    assert cert.passed and cert.c is not None and cert.c >= 1.0


def test_validate_cubic_sine_passes():
    assert validate_nonlinearity(Nonlinearity.cubic_sine()).passed


def test_validate_negative_linear_fails():
    with pytest.raises(NonlinearityError) as err:
        validate_nonlinearity(Nonlinearity.polynomial([0, -1]))
    assert any("F(u) >= -C" in name for name, _ in err.value.certificate.failures)


def test_validate_quintic_fails_growth():
    cert = validate_nonlinearity(Nonlinearity.polynomial([0, 0, 0, 0, 0, 1]), strict=False)
    assert not cert.passed
    assert any("f'(u)" in name for name, _ in cert.failures)


def test_validate_nonzero_at_origin_fails():
    cert = validate_nonlinearity(Nonlinearity.polynomial([1, 0, 0, 1]), strict=False)
    assert ("f(0) = 0", [0.0]) in cert.failures


def test_polynomial_derivatives():
    f = Nonlinearity.polynomial([0, 2, 0, 1])
    u = np.linspace(-3, 3, 7)
    assert np.allclose(f.f(u), 2 * u + u**3)
    assert np.allclose(f.df(u), 2 + 3 * u**2)
    assert np.allclose(f.d2f(u), 6 * u)
    assert np.allclose(f.F(u), u**2 + u**4 / 4)


def test_presets():
    assert nonlinearity_from_spec("cubic").name == "cubic"
    assert nonlinearity_from_spec([0, 0, 0, 1]).coefficients == (0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        nonlinearity_from_spec("sextic")


# ---------------------------------------------------------------- solver


def test_zero_nonlinearity_matches_linear(b8):
    grid = TimeGrid.covering(5.0, default_dt(b8))
    init = state(b8, [(1, 0.5), (3, -0.2)], [(2, 0.1)])
    eta = np.outer(np.cos(grid.times), np.arange(1.0, 9.0))
    u = solve_nlw(Nonlinearity.zero(), 0.1, None, eta, init, grid)
    v = solve_linear(None, eta, init, 0.1, grid)
    assert np.max(np.abs(u.states - v.states)) <= 1e-12


def test_undamped_hamiltonian_conserved(b8):
    grid = TimeGrid.covering(4 * math.pi, default_dt(b8) / 2)
    init = state(b8, [(1, 1.0), (2, 0.3)], [(3, 0.5)])
    tr = solve_nlw(Nonlinearity.cubic(), 0.0, None, None, init, grid, record_every=50)
    H = tr.meta["hamiltonian"]
    assert np.max(np.abs(H - H[0])) / H[0] <= 1e-5


def test_damped_hamiltonian_decreases(b8):
    grid = TimeGrid.covering(10.0, default_dt(b8))
    init = state(b8, [(1, 1.0)], [(2, 0.5)])
    H = solve_nlw(Nonlinearity.cubic(), 0.3, None, None, init, grid, record_every=100).meta["hamiltonian"]
    assert np.all(np.diff(H) <= 1e-9 * H[0])
    assert H[-1] < 0.5 * H[0]


def manufactured(basis, gamma, dt, T=3.0):
    # u = a(t) e_1 with a = sin 2t + 0.5 cos t; h is chosen so that u solves the equation
    grid = TimeGrid.covering(T, dt)
    t = grid.times
    a = np.sin(2 * t) + 0.5 * np.cos(t)
    da = 2 * np.cos(2 * t) - 0.5 * np.sin(t)
    d2a = -4 * np.sin(2 * t) - 0.5 * np.cos(t)
    e1 = basis.values[0]
    p3 = basis.analyze(e1**3)
    h = np.zeros((t.size, basis.n_modes))
    h[:, 0] = d2a + gamma * da + basis.eigenvalues[0] * a
    h += (a**3)[:, None] * p3[None, :]
    init = state(basis, [(1, a[0])], [(1, da[0])])
    tr = solve_nlw(Nonlinearity.cubic(), gamma, h, None, init, grid)
    exact = np.zeros_like(tr.states)
    exact[:, 0] = a
    exact[:, basis.n_modes] = da
    return float(np.max(np.sqrt(stacked_energy(basis.eigenvalues, (tr.states - exact).T))))


def test_manufactured_solution_second_order(b8):
    dt = 0.02
    e1, e2 = manufactured(b8, 0.1, dt), manufactured(b8, 0.1, dt / 2)
    assert e2 <= 1e-3
    assert math.log2(e1 / e2) >= 1.8


def test_blowup_flagged(b8):
    grid = TimeGrid.covering(20.0, default_dt(b8))
    tr = solve_nlw(Nonlinearity.polynomial([0, 0, 0, -1]), 0.0, None, None, state(b8, [(1, 3.0)]), grid,
                   ceiling=1e6)
    assert tr.meta["blowup"]
    assert tr.states.shape[0] < grid.n_steps + 1


def test_forcing_field_projection(b8):
    h = ForcingField.from_function(b8, lambda t, x: t * np.sin(2 * x[:, 0]), [0.0, 2.0])
    c = h(1.0)
    assert c[1] == pytest.approx(math.sqrt(math.pi / 2), rel=1e-12)
    assert np.sum(np.abs(np.delete(c, 1))) <= 1e-12
    assert ForcingField.zero(b8).is_zero
    with pytest.raises(ValueError):
        h(3.0)


# ---------------------------------------------------------------- reference and linearisation


def test_reference_zero_forcing_zero_init(b8):
    grid = TimeGrid.covering(5.0, default_dt(b8))
    ref = reference_trajectory(Nonlinearity.cubic(), 0.1, ForcingField.zero(b8), ModalState.zeros(b8), grid)
    assert not np.any(ref.trace.states)
    assert ref.bound == 0.0 and not ref.growth


def test_linearize_linear_f_is_constant_multiple(b8):
    grid = TimeGrid.covering(1.0, default_dt(b8))
    tr = solve_nlw(Nonlinearity.polynomial([0, 2]), 0.1, None, None, state(b8, [(1, 1.0)]), grid)
    b = linearize(Nonlinearity.polynomial([0, 2]), tr, stride=16)
    assert np.allclose(b.matrix_at(0.5), 2 * np.eye(8), atol=1e-12)


def test_linearize_cubic_against_finer_quadrature(b8):
    grid = TimeGrid.covering(1.0, default_dt(b8))
    f = Nonlinearity.cubic()
    tr = solve_nlw(f, 0.1, None, None, state(b8, [(1, 1.0), (2, -0.4)], [(4, 0.3)]), grid)
    b = linearize(f, tr, stride=16)
    assert b.times[-1] == pytest.approx(grid.t_end)
    fine = build_basis(interval(), 8, panels=4 * 8)
    for i in (0, tr.states.shape[0] - 1):
        v = tr.states[i, :8]
        B = b.matrix_at(float(tr.state_times[i]))
        u_fine = v @ fine.values
        ref = (fine.values * fine.quad_weights * f.df(u_fine)) @ fine.values.T
        assert np.allclose(B, ref, atol=1e-12)
        assert np.allclose(B, mult_operator_matrix(f.df(v @ b8.values), b8), atol=1e-12)


# ---------------------------------------------------------------- closed loop


@pytest.fixture(scope="module")
def loop(b8):
    """Reference, linearisation and feedback law on two windows with an 8-mode basis."""
    f = Nonlinearity.cubic()
    gamma = 0.1
    T = 2.5 * b8.domain.t_min
    win = TimeGrid.covering(T, default_dt(b8))
    dt = win.dt
    grid = TimeGrid(0.0, dt, 2 * win.n_steps)
    long = TimeGrid(0.0, dt, grid.n_steps + int(40.0 / dt))
    init = state(b8, [(1, 0.8), (2, 0.2)], [(1, 0.3)])
    ref = reference_trajectory(f, gamma, ForcingField.zero(b8), init, long)
    b = linearize(f, ref.trace, stride=16)
    chi = collar_cutoff(b8)
    law = riccati_value(b, chi, design_beta(T), 5, gamma, grid, riccati_tol=1e-6, max_tail=40.0)
    path = ReferencePath.from_trace(ref.trace, grid, collocation_for(f, b8))
    return f, gamma, path, law, b, T


def test_reference_path_requires_every_node(b8):
    grid = TimeGrid.covering(2.0, default_dt(b8))
    tr = solve_nlw(Nonlinearity.cubic(), 0.1, None, None, state(b8, [(1, 0.5)]), grid, record_every=4)
    with pytest.raises(ValueError):
        ReferencePath.from_trace(tr, grid, collocation_for(Nonlinearity.cubic(), b8))


def test_closed_loop_zero_perturbation(loop, b8):
    f, gamma, path, law, _, _ = loop
    res = closed_loop(f, gamma, path, law, ModalState.zeros(b8))
    assert not np.any(res.energies)
    assert res.success and not res.blowup


def test_closed_loop_decays_and_scales(loop, b8):
    f, gamma, path, law, _, T = loop
    P = random_perturbations(b8, 1e-2, 1, np.random.default_rng(0))[:, 0]
    big = closed_loop(f, gamma, path, law, P)
    half = closed_loop(f, gamma, path, law, 0.5 * P)
    assert big.success and half.success
    assert half.beta_fit == pytest.approx(big.beta_fit, rel=0.1)
    unc = closed_loop(f, gamma, path, None, P)
    assert unc.energies[-1] > big.energies[-1]


def test_random_perturbations_norm(b8):
    P = random_perturbations(b8, 0.3, 6, np.random.default_rng(1))
    assert np.allclose(np.sqrt(stacked_energy(b8.eigenvalues, P)), 0.3)


def test_batch_matches_single(loop, b8):
    f, gamma, path, law, _, _ = loop
    P = random_perturbations(b8, 1e-2, 2, np.random.default_rng(2))
    batch = closed_loop(f, gamma, path, law, P)
    one = closed_loop(f, gamma, path, law, P[:, 1])
    assert np.allclose(batch.energies[:, 1], one.energies, rtol=1e-10, atol=1e-300)


def test_find_epsilon_small_search(loop):
    f, gamma, path, law, _, _ = loop
    res = find_epsilon(f, gamma, path, law, np.random.default_rng(3), count=2, eps0=0.05, eps_max=0.2,
                       bisections=1)
    assert res.epsilon >= 0.05
    assert res.baseline is not None
    assert [h["epsilon"] for h in res.history][:2] == [0.05, 0.1]


def test_picard_zero_perturbation(loop, b8):
    f, gamma, path, law, b, _ = loop
    rep = picard_probe(f, gamma, path, law, b, ModalState.zeros(b8), iterations=3)
    assert not np.any(rep.fixed_point)
    assert rep.converged


def test_picard_contracts_to_closed_loop(loop, b8):
    f, gamma, path, law, b, _ = loop
    P = ModalState.from_vector(b8, random_perturbations(b8, 1e-2, 1, np.random.default_rng(4))[:, 0])
    rep = picard_probe(f, gamma, path, law, b, P, iterations=15)
    assert rep.converged and all(r < 1 for r in rep.ratios)
    cl = closed_loop(f, gamma, path, law, P, keep_states=True)
    lam = b8.eigenvalues
    diff = z_norm(rep.fixed_point - cl.differences, path.grid.times, lam, 0.0)
    assert diff <= 1e-10 * z_norm(cl.differences, path.grid.times, lam, 0.0)
