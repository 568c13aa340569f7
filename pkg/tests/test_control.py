import json
import math

import numpy as np
import pytest
import scipy.linalg

from wavestab.control import (
    ControlError,
    ControlSpace,
    IntervalProblem,
    are_hamiltonian,
    concatenate_control,
    default_N,
    design_beta,
    dpp_consistency,
    feedback_gain,
    fit_decay,
    riccati_value,
    simulate_feedback,
    synthesize_interval_control,
    tail_factor,
    verify_optimality,
    zero_law,
)
from wavestab.spectral import CutoffField, ModalState, build_basis, interval
from wavestab.waveop import PotentialField, TimeGrid, default_dt, stacked_energy


def rand_state(basis, seed, scale=1.0):
    return ModalState.from_vector(basis, scale * np.random.default_rng(seed).standard_normal(2 * basis.n_modes))


def synth(sm, init, b="default", **kw):
    b = sm.b if b == "default" else b
    return synthesize_interval_control(b, sm.chi, init, 0.0, sm.T, sm.m, sm.N, sm.delta_pen, sm.sigma,
                                       sm.gamma, sm.grid, **kw)


@pytest.fixture(scope="module")
def ic(small):
    return synth(small, rand_state(small.basis, 0))


@pytest.fixture(scope="module")
def law(small):
    grid = TimeGrid(0.0, small.grid.dt, 2 * small.grid.n_steps)
    return riccati_value(small.b, small.chi, design_beta(small.T), small.m, small.gamma, grid,
                         riccati_tol=1e-6, max_tail=100.0)


# ---------------------------------------------------------------- basics


def test_tail_factor_and_default_N():
    basis = build_basis(interval(), 32)
    assert tail_factor(basis, 3, 0.5) == pytest.approx(16 ** -0.25)
    assert tail_factor(basis, 32, 0.5) == 0.0
    N = default_N(basis, 0.5)
    assert tail_factor(basis, N, 0.5) <= 0.25 < tail_factor(basis, N - 1, 0.5)


def test_design_beta():
    assert design_beta(2.0) == pytest.approx(math.log(2) / 2)


def test_control_space_membership(small):
    space = ControlSpace.build(small.chi, small.m)
    c = np.random.default_rng(1).standard_normal((50, small.m))
    assert space.complement_residual(space.to_modal(c)) <= 1e-10
    # a single high mode is far from chi e_1..e_m
    e = np.zeros(small.basis.n_modes)
    e[-1] = 1.0
    assert space.complement_residual(e) > 1e-3


def test_control_space_rejects_bad_m(small):
    with pytest.raises(ValueError):
        ControlSpace.build(small.chi, 0)
    with pytest.raises(ValueError):
        ControlSpace.build(small.chi, small.basis.n_modes + 1)


# ---------------------------------------------------------------- interval operator


def test_zero_init_is_vacuous(small):
    res = synth(small, ModalState.zeros(small.basis))
    assert res.vacuous
    assert not np.any(res.eta) and not np.any(res.v_final)


def test_zero_potential_gives_zero_control(small):
    res = synth(small, rand_state(small.basis, 2), b=None)
    assert np.max(np.abs(res.eta)) <= 1e-12 * max(1.0, np.max(np.abs(res.init)))
    assert np.allclose(res.v_final, res.z_final)


def test_window_shorter_than_threshold_rejected(small):
    T = 0.5 * small.basis.domain.t_min
    with pytest.raises(ControlError):
        synthesize_interval_control(small.b, small.chi, rand_state(small.basis, 0), 0.0, T, small.m, small.N,
                                    small.delta_pen, small.sigma, small.gamma)


def test_grid_mismatch_rejected(small):
    with pytest.raises(ValueError):
        synthesize_interval_control(small.b, small.chi, rand_state(small.basis, 0), 1.0, small.T, small.m,
                                    small.N, small.delta_pen, small.sigma, small.gamma, small.grid)


def test_optimality_residuals(ic, small):
    res = verify_optimality(ic, small.b)
    assert res["adjoint"] <= 1e-10
    assert res["stationarity"] <= 1e-10
    assert res["terminal"] <= 1e-10
    assert res["identity"] <= 1e-8
    assert ic.converged


def test_realised_control_in_space(ic, small):
    space = ControlSpace.build(small.chi, small.m)
    assert space.complement_residual(ic.eta) <= 1e-10


def test_direct_and_cg_agree(ic, small):
    cg = synth(small, rand_state(small.basis, 0), solver="cg")
    scale = np.max(np.abs(ic.coeffs))
    assert np.max(np.abs(cg.coeffs - ic.coeffs)) <= 1e-8 * scale
    assert cg.cost == pytest.approx(ic.cost, rel=1e-10)


def test_unknown_solver(small):
    with pytest.raises(ValueError):
        synth(small, rand_state(small.basis, 0), solver="lu")


def test_gradient_vanishes_and_matches_fd(ic):
    prob: IntervalProblem = ic.traces["problem"]
    g = prob.gradient(ic.coeffs)
    rng = np.random.default_rng(3)
    d = rng.standard_normal(ic.coeffs.shape)
    # at the optimum the directional derivative is zero relative to curvature
    h = 1e-3 * np.max(np.abs(ic.coeffs))
    curv = (prob.cost(ic.coeffs + h * d) - 2 * prob.cost(ic.coeffs) + prob.cost(ic.coeffs - h * d)) / h**2
    assert abs(float(np.sum(g * d))) <= 1e-6 * curv * np.max(np.abs(ic.coeffs))
    # away from the optimum the adjoint gradient matches central differences
    c = ic.coeffs + 0.1 * np.max(np.abs(ic.coeffs)) * rng.standard_normal(ic.coeffs.shape)
    g = prob.gradient(c)
    fd = (prob.cost(c + h * d) - prob.cost(c - h * d)) / (2 * h)
    assert float(np.sum(g * d)) == pytest.approx(fd, rel=1e-6)


def test_perturbing_control_raises_cost(ic):
    prob: IntervalProblem = ic.traces["problem"]
    rng = np.random.default_rng(4)
    for _ in range(5):
        d = rng.standard_normal(ic.coeffs.shape)
        assert prob.cost(ic.coeffs + 1e-3 * d) > ic.cost


def test_interval_operator_linear(small):
    a, b = rand_state(small.basis, 5), rand_state(small.basis, 6)
    ra, rb = synth(small, a), synth(small, b)
    rab = synth(small, a * 2.0 + b * (-0.5))
    combo = 2.0 * ra.v_final - 0.5 * rb.v_final
    assert np.max(np.abs(rab.v_final - combo)) <= 1e-8 * np.max(np.abs(combo))


def test_contraction_consistent_with_energies(ic, small):
    lam = small.basis.eigenvalues
    E = ic.v_energies
    assert E[0] == pytest.approx(stacked_energy(lam, ic.init))
    assert math.sqrt(E[-1] / E[0]) == pytest.approx(ic.contraction, rel=1e-10)
    assert ic.contraction <= 0.5


def test_concatenation_halves_each_window(small):
    init = rand_state(small.basis, 7)
    cc = concatenate_control(small.b, small.chi, init, small.T, 3, small.m, small.N, small.delta_pen,
                             small.sigma, small.gamma, small.grid.dt)
    assert np.all(cc.contractions <= 0.5)
    ratio = cc.energies[-1] / cc.energies[0]
    assert ratio == pytest.approx(float(np.prod(cc.contractions**2)), rel=1e-9)
    assert ratio <= 0.5 ** 6 * 1.1
    assert cc.beta_fit >= cc.beta_design
    tab = cc.node_table()
    assert tab.shape == (3 * small.grid.n_steps + 1, small.m + 3)
    assert np.all(np.diff(tab[:, 0]) > 0)
    assert tab[-1, -1] == pytest.approx(cc.energies[-1], rel=1e-12)


def test_concatenation_zero_init(small):
    cc = concatenate_control(small.b, small.chi, ModalState.zeros(small.basis), small.T, 2, small.m,
                             small.N, small.delta_pen, small.sigma, small.gamma, small.grid.dt)
    assert not np.any(cc.final)
    assert cc.eta_l2_beta == 0.0


# ---------------------------------------------------------------- Riccati


def test_are_matches_scipy():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((4, 4))
    B = rng.standard_normal((4, 2))
    H = np.diag([1.0, 2.0, 3.0, 4.0])
    P = are_hamiltonian(A, B, H)
    ref = scipy.linalg.solve_continuous_are(A, B, H, np.eye(2))
    assert np.allclose(P, ref, rtol=1e-9, atol=1e-10)


def test_riccati_single_mode_reaches_are():
    basis = build_basis(interval(), 1)
    chi = CutoffField.constant(basis)
    beta, gamma = 0.05, 0.1
    grid = TimeGrid.covering(20.0, default_dt(basis))
    law = riccati_value(None, chi, beta, 1, gamma, grid, riccati_tol=1e-12, max_tail=2000.0)
    A = np.array([[0.0, 1.0], [-1.0, -gamma]]) + 0.5 * beta * np.eye(2)
    P = are_hamiltonian(A, np.array([[0.0], [1.0]]), np.diag([1.0, 1.0]))
    assert law.converged
    assert np.allclose(law.values[0], P, rtol=1e-8, atol=1e-10)


def test_law_gain_nodes_exact(law):
    for i in (0, 3, law.times.size - 1):
        assert np.array_equal(feedback_gain(law, float(law.times[i])), law.gains[i])


def test_law_gain_bound_holds_between_nodes(law):
    rng = np.random.default_rng(9)
    ts = rng.uniform(law.times[0], law.times[-1], 1000)
    worst = max(np.linalg.norm(law.gain(t), 2) for t in ts)
    assert worst <= law.certificates()["gain_bound"] * (1 + 1e-12)


def test_law_out_of_range(law):
    with pytest.raises(ValueError):
        law.gain(law.times[-1] + 1.0)
    with pytest.raises(ValueError):
        law.value_matrix(-1.0)


def test_law_values_psd_and_growth(law):
    for V in law.values:
        assert np.linalg.eigvalsh(V).min() >= -1e-8 * np.abs(V).max()
    t_mid = float(law.value_times[law.value_times.size // 2])
    assert law.operator_norm(t_mid) <= law.growth_constant * math.exp(law.beta * t_mid) * (1 + 1e-9)


def test_law_serialises(law):
    d = json.loads(json.dumps(law.to_dict()))
    assert d["m"] == law.m
    assert len(d["gains"]) == law.times.size
    assert law.history and all(len(h) == 2 for h in law.history)


def test_zero_value_gives_zero_gain(law):
    z = zero_law(law)
    assert not np.any(z.gain(float(law.times[5])))


def test_dpp_trivial_cases(law, small):
    assert dpp_consistency(law, small.b, ModalState.zeros(small.basis), 5.0, small.gamma, small.grid.dt) == 0.0
    assert dpp_consistency(law, small.b, rand_state(small.basis, 10), 0.0, small.gamma, small.grid.dt) == 0.0


def test_dpp_small(law, small):
    res = dpp_consistency(law, small.b, rand_state(small.basis, 11), small.T, small.gamma, small.grid.dt)
    assert res <= 1e-4


def test_feedback_decays_at_design_rate(law, small):
    grid = TimeGrid(0.0, small.grid.dt, 2 * small.grid.n_steps)
    sim = simulate_feedback(law, small.b, rand_state(small.basis, 12), small.gamma, grid, small.basis,
                            record_every=20)
    _, beta = fit_decay(sim.trace.times, sim.trace.energies, t_from=small.T / 2)
    assert beta >= 0.8 * law.beta
    assert sim.controls.shape[0] == grid.n_steps + 1


def test_fit_decay_exact_exponential():
    t = np.linspace(0, 10, 50)
    C, beta = fit_decay(t, 3.0 * np.exp(-0.4 * t))
    assert C == pytest.approx(3.0) and beta == pytest.approx(0.4)
    assert math.isnan(fit_decay(t[:1], np.ones(1))[1])


def test_constant_potential_law_matches_average(small):
    pot = PotentialField.constant(small.basis, 1.0)
    grid = TimeGrid.covering(small.T, small.grid.dt)
    law = riccati_value(pot, small.chi, 0.05, small.m, small.gamma, grid, terminal="are", riccati_tol=1e-10,
                        max_tail=40.0)
    # the ARE terminal is already stationary for a constant potential
    assert law.history[-1][1] <= 1e-8
