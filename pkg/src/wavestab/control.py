"""Stabilising controls for the linearised wave equation.

Two constructions live here.  The interval operator solves, on one window
[s, s + T], the penalised minimum-effort problem for the correction w in
v = z + w (z is the damped free flow, w is driven by eta - b z) and is
applied window after window.  The feedback law comes from the weighted
infinite-horizon LQ problem, computed as a backward differential Riccati
sweep after the substitution w = e^{beta t / 2} v.

Both are posed for the time-discrete scheme of :mod:`wavestab.waveop`, so
the optimality conditions hold to rounding and the discrete adjoint is the
exact transpose of the forward solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .spectral import CutoffField, ModalState, SpectralBasis
from .waveop import Integrator, ModeFlow, PotentialField, Recorder, SimulationTrace, TimeGrid, stacked_energy
from .observability import trapezoid_weights

OPT_TOL = 1e-6
CACHE_BYTES = 256 * 2**20


class ControlError(RuntimeError):
    """Raised when a control synthesis step cannot produce a valid result."""


def tail_factor(basis: SpectralBasis, N: int, sigma: float) -> float:
    """delta_N(sigma) = lambda_{N+1}^{-sigma/2}: H^sigma to H factor on modes above N."""
    if N >= basis.n_modes:
        return 0.0
    return float(basis.eigenvalues[N] ** (-sigma / 2))


def default_N(basis: SpectralBasis, sigma: float, target: float = 0.25) -> int:
    """Smallest N with tail_factor(N) <= target (capped at n_modes)."""
    for N in range(1, basis.n_modes + 1):
        if tail_factor(basis, N, sigma) <= target:
            return N
    return basis.n_modes


def design_beta(T: float) -> float:
    return math.log(2.0) / T


@dataclass(frozen=True, eq=False)
class ControlSpace:
    """F_m = span{chi e_1, ..., chi e_m}, coordinates are the coefficients c_j."""

    basis: SpectralBasis
    m: int
    chi: CutoffField
    generators: np.ndarray = field(repr=False)
    gram: np.ndarray = field(repr=False)
    modal: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, chi: CutoffField, m: int) -> "ControlSpace":
        basis = chi.basis
        if not 1 <= m <= basis.n_modes:
            raise ValueError(f"m={m} outside [1, {basis.n_modes}]")
        gen = chi.values[None, :] * basis.values[:m]
        gram = (gen * basis.quad_weights) @ gen.T
        # chi e_j restricted to a thin collar are nearly collinear, so the Gram
        # matrix is numerically singular for modest m; nothing below inverts it
        modal = chi.matrix()[:, :m]
        return cls(basis, m, chi, gen, gram, modal)

    def to_modal(self, c: np.ndarray) -> np.ndarray:
        """Galerkin coefficients of eta = sum_j c_j chi e_j; c may be (m,) or (K, m)."""
        return c @ self.modal.T

    def complement_residual(self, eta: np.ndarray) -> float:
        """Relative distance of modal forcings from the span of the generators."""
        eta = np.atleast_2d(eta)
        coef, *_ = np.linalg.lstsq(self.modal, eta.T, rcond=None)
        res = eta.T - self.modal @ coef
        return float(np.linalg.norm(res) / max(np.linalg.norm(eta), 1e-300))


class _SchemeOps:
    """Forward scheme and its exact transpose on one window, for w'' + gamma w' - Delta w + b w = f."""

    def __init__(self, basis: SpectralBasis, b: PotentialField | None, gamma: float, grid: TimeGrid):
        self.basis, self.b, self.gamma, self.grid = basis, b, gamma, grid
        self.n = basis.n_modes
        self.dt = grid.dt
        self.flow = ModeFlow(basis.eigenvalues, gamma, grid.dt)
        self.times = grid.times
        self.has_b = b is not None and not b.is_zero
        self._cache = None
        if self.has_b and not b.is_constant and grid.n_steps * self.n**2 * 8 <= CACHE_BYTES:
            self._cache = np.stack([b.matrix_at(t) for t in self.times])

    def B(self, k: int) -> np.ndarray:
        if self._cache is not None:
            return self._cache[k]
        if self.b.is_constant:
            return self.b.matrices[0]
        return self.b.matrix_at(self.times[k])

    def _pforce(self):
        if not self.has_b:
            return None
        return lambda k, t, v: -(self.B(k) @ v)

    def forward(self, f: np.ndarray, X0=None, record: bool = False):
        n = self.n
        X0 = np.zeros(2 * n) if X0 is None else X0
        rec = Recorder(self.basis, self.grid) if record else None
        XK = Integrator(self.basis, self.gamma, self.dt).run(X0, self.grid, self._pforce(), f, observer=rec)
        return (XK, rec) if record else XK

    def _ET(self, x):
        fl, n = self.flow, self.n
        v, p = x[:n], x[n:]
        if x.ndim == 1:
            return np.concatenate([fl.a11 * v + fl.a21 * p, fl.a12 * v + fl.a22 * p])
        return np.concatenate(
            [fl.a11[:, None] * v + fl.a21[:, None] * p, fl.a12[:, None] * v + fl.a22[:, None] * p]
        )

    def adjoint(self, muK: np.ndarray):
        """Discrete adjoint states mu_k and the transposed forcing sensitivities L_k^T mu_K.

        Returns (mu, lt) with mu[k] = Phi(K, k)^T mu_K and lt[k] = L_k^T mu_K,
        where L_k is the derivative of the terminal state with respect to the
        velocity forcing at node k.
        """
        n, dt, K = self.n, self.dt, self.grid.n_steps
        mu = np.empty((K + 1,) + muK.shape)
        lt = np.zeros((K + 1, n) + muK.shape[1:])
        mu[K] = muK
        lt[K] = 0.5 * dt * muK[n:]
        for k in range(K - 1, -1, -1):
            nu = mu[k + 1].copy()
            if self.has_b:
                nu[:n] -= 0.5 * dt * (self.B(k + 1) @ nu[n:])
            e = self._ET(nu)
            lt[k] += 0.5 * dt * e[n:]
            if self.has_b:
                e[:n] -= 0.5 * dt * (self.B(k) @ e[n:])
            mu[k] = e
            if k > 0:
                lt[k] += 0.5 * dt * e[n:]
        return mu, lt

    def step_matrix(self, k: int) -> np.ndarray:
        """A_k with X_{k+1} = A_k X_k for the unforced scheme (used by residual checks)."""
        n, dt = self.n, self.dt
        I = np.eye(2 * n)
        Kk, Ck = I.copy(), I.copy()
        if self.has_b:
            Kk[n:, :n] -= 0.5 * dt * self.B(k)
            Ck[n:, :n] -= 0.5 * dt * self.B(k + 1)
        return Ck @ self.flow.matrix() @ Kk


@dataclass(eq=False)
class IntervalControl:
    s: float
    T: float
    m: int
    N: int
    sigma: float
    delta_pen: float
    grid: TimeGrid = field(repr=False)
    coeffs: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    adjoint: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    init: np.ndarray = field(repr=False)
    z_final: np.ndarray = field(repr=False)
    w_final: np.ndarray = field(repr=False)
    v_final: np.ndarray = field(repr=False)
    contraction: float
    vacuous: bool
    cost: float
    w_sigma_norm: float
    w_low_norm: float
    solver: str
    converged: bool
    residuals: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict, repr=False)
    v_energies: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "s": self.s,
            "T": self.T,
            "m": self.m,
            "N": self.N,
            "contraction": None if self.vacuous else self.contraction,
            "cost": self.cost,
            "w_terminal_H_sigma": self.w_sigma_norm,
            "w_terminal_low_modes": self.w_low_norm,
            "solver": self.solver,
            "converged": self.converged,
            **{f"residual_{k}": v for k, v in self.residuals.items()},
        }


class IntervalProblem:
    """The discrete penalised problem on one window, with direct and CG solvers.

    Unknowns are control coefficients c_k in R^m at every node; the cost is

        J(c) = 1/2 sum_k w_k c_k^T Lam_m^sigma c_k + (1/delta) X_K^T D X_K

    with w_k the trapezoid weights, X_K the terminal state of w and D the
    H-norm weight restricted to the first N modes.
    """

    def __init__(self, b, space: ControlSpace, init: ModalState | np.ndarray, grid: TimeGrid, N: int,
                 delta_pen: float, sigma: float, gamma: float):
        basis = space.basis
        n = basis.n_modes
        if not 1 <= N <= n:
            raise ValueError(f"N={N} outside [1, {n}]")
        if not delta_pen > 0:
            raise ValueError("delta_pen must be positive")
        self.basis, self.space, self.grid = basis, space, grid
        self.N, self.delta, self.sigma, self.gamma = N, delta_pen, sigma, gamma
        self.ops = _SchemeOps(basis, b, gamma, grid)
        self.X0 = init.vector if isinstance(init, ModalState) else np.asarray(init, dtype=float)
        self.w = trapezoid_weights(grid)
        lam = basis.eigenvalues
        self.lam_m = lam[: space.m] ** sigma
        low = np.arange(n) < N
        self.D = np.concatenate([lam * low, low.astype(float)])
        zrec = Recorder(basis, grid)
        self.z_final = Integrator(basis, gamma, grid.dt).run(self.X0, grid, observer=zrec)
        self.z_states = np.array(zrec.states)
        self.z = self.z_states[:, :n]
        if self.ops.has_b:
            self.bz = np.stack([self.ops.B(k) @ self.z[k] for k in range(grid.n_steps + 1)])
        else:
            self.bz = np.zeros_like(self.z)

    # forward / adjoint building blocks
    def forcing(self, c: np.ndarray) -> np.ndarray:
        return self.space.to_modal(c) - self.bz

    def terminal(self, c: np.ndarray) -> np.ndarray:
        return self.ops.forward(self.forcing(c))

    def cost(self, c: np.ndarray) -> float:
        XK = self.terminal(c)
        return 0.5 * float(np.sum(self.w[:, None] * self.lam_m * c * c)) + float(XK @ (self.D * XK)) / self.delta

    def gradient(self, c: np.ndarray) -> np.ndarray:
        XK = self.terminal(c)
        _, lt = self.ops.adjoint((2.0 / self.delta) * self.D * XK)
        return self.w[:, None] * self.lam_m * c + lt @ self.space.modal

    def _hessian_apply(self, c: np.ndarray) -> np.ndarray:
        XK = self.ops.forward(self.space.to_modal(c))
        _, lt = self.ops.adjoint((2.0 / self.delta) * self.D * XK)
        return self.w[:, None] * self.lam_m * c + lt @ self.space.modal

    def _coeffs_from_terminal(self, XK: np.ndarray):
        mu, lt = self.ops.adjoint(-(2.0 / self.delta) * self.D * XK)
        q = lt / self.w[:, None]
        c = (q @ self.space.modal) / self.lam_m
        return c, q, mu

    def solve_direct(self):
        """Dual normal equations (I + (2/delta) G_c D) X_K = X_K^0, 2n x 2n."""
        n = self.basis.n_modes
        XK0 = self.ops.forward(-self.bz)
        _, LT = self.ops.adjoint(np.eye(2 * n))  # (K+1, n, 2n): L_k^T
        Xm = self.space.modal
        S = (Xm / self.lam_m) @ Xm.T
        SL = np.matmul(S, LT).reshape(-1, 2 * n)
        Gc = (LT / self.w[:, None, None]).reshape(-1, 2 * n).T @ SL
        Gc = 0.5 * (Gc + Gc.T)
        A = np.eye(2 * n) + (2.0 / self.delta) * Gc * self.D[None, :]
        XK = np.linalg.solve(A, XK0)
        c, q, mu = self._coeffs_from_terminal(XK)
        return c, q, mu, {"iterations": 1, "condition": float(np.linalg.cond(A))}

    def solve_cg(self, tol: float = 1e-13, max_iter: int | None = None):
        """Preconditioned CG on the primal normal equations with adjoint Hessian products."""
        K1, m = self.grid.n_steps + 1, self.space.m
        max_iter = max_iter or 4 * (2 * self.N + 2) + 20
        XK0 = self.ops.forward(-self.bz)
        _, lt0 = self.ops.adjoint((2.0 / self.delta) * self.D * XK0)
        rhs = -(lt0 @ self.space.modal)
        Minv = 1.0 / (self.w[:, None] * self.lam_m)
        c = np.zeros((K1, m))
        r = rhs.copy()
        zr = Minv * r
        p = zr.copy()
        rz = float(np.sum(r * zr))
        r0 = math.sqrt(float(np.sum(Minv * rhs * rhs))) or 1.0
        it = 0
        hist = []
        while it < max_iter:
            res = math.sqrt(max(rz, 0.0)) / r0
            hist.append(res)
            if res < tol:
                break
            Hp = self._hessian_apply(p)
            alpha = rz / float(np.sum(p * Hp))
            c += alpha * p
            r -= alpha * Hp
            zr = Minv * r
            rz_new = float(np.sum(r * zr))
            p = zr + (rz_new / rz) * p
            rz = rz_new
            it += 1
        converged = hist[-1] < max(tol, 1e-10)
        XK = self.terminal(c)
        _, q, mu = self._coeffs_from_terminal(XK)
        return c, q, mu, {"iterations": it, "history": hist, "converged": converged}


def synthesize_interval_control(
    b: PotentialField | None,
    chi: CutoffField,
    init: ModalState | np.ndarray,
    s: float,
    T: float,
    m: int,
    N: int,
    delta_pen: float,
    sigma: float,
    gamma: float,
    grid: TimeGrid | None = None,
    solver: str = "direct",
    record: bool = False,
    opt_tol: float = OPT_TOL,
    space: ControlSpace | None = None,
) -> IntervalControl:
    """Interval control Theta_s applied to ``init`` on the window [s, s + T].

    The realised control is eta = chi P_m zeta with zeta from the penalised
    problem; the returned record carries the terminal states of z, w and
    v = z + w, the contraction |Phi_v(s+T)|_H / |Phi_v(s)|_H and the
    optimality residuals.
    """
    from .waveop import default_dt

    basis = chi.basis
    if grid is None:
        grid = TimeGrid.covering(T, default_dt(basis), t0=s)
    if abs(grid.t0 - s) > 1e-9 or abs(grid.T - T) > 1e-9 * max(1.0, T):
        raise ValueError("grid does not match the window [s, s + T]")
    if T < basis.domain.t_min:
        raise ControlError(f"window T={T:.4g} below the geometric threshold {basis.domain.t_min:.4g}")
    space = space or ControlSpace.build(chi, m)
    prob = IntervalProblem(b, space, init, grid, N, delta_pen, sigma, gamma)
    n = basis.n_modes
    if not np.any(prob.X0):
        K1 = grid.n_steps + 1
        zeros = np.zeros(2 * n)
        ic = IntervalControl(
            s, T, m, N, sigma, delta_pen, grid, np.zeros((K1, m)), np.zeros((K1, n)), np.zeros((K1, 2 * n)),
            np.zeros((K1, n)), zeros, zeros, zeros, zeros, 0.0, True, 0.0, 0.0, 0.0, solver, True,
        )
        ic.residuals = {"adjoint": 0.0, "stationarity": 0.0, "terminal": 0.0, "identity": 0.0}
        ic.v_energies = np.zeros(K1)
        return ic
    if solver == "direct":
        c, q, mu, info = prob.solve_direct()
    elif solver == "cg":
        c, q, mu, info = prob.solve_cg()
        if not info["converged"]:
            raise ControlError(f"CG did not converge: residual {info['history'][-1]:.3e}")
    else:
        raise ValueError(f"unknown solver {solver!r}")
    eta = space.to_modal(c)
    XK, rec = prob.ops.forward(eta - prob.bz, record=True)
    v_final = prob.z_final + XK
    h = lambda X: math.sqrt(stacked_energy(basis.eigenvalues, X))  # noqa: E731
    init_norm = h(prob.X0)
    lam = basis.eigenvalues
    low = np.concatenate([np.arange(n) < N] * 2)
    w_sigma = math.sqrt(float(np.sum(lam**sigma * (lam * XK[:n] ** 2 + XK[n:] ** 2))))
    w_low = math.sqrt(float(np.sum((XK * low) ** 2)))
    ic = IntervalControl(
        s, T, m, N, sigma, delta_pen, grid, c, eta, mu, q, prob.X0.copy(), prob.z_final, XK, v_final,
        h(v_final) / init_norm, False, prob.cost(c), w_sigma / init_norm, w_low / init_norm, solver, True,
    )
    ic.traces = {"problem": prob, "info": info}
    ic.v_energies = stacked_energy(lam, (prob.z_states + np.array(rec.states)).T)
    if record:
        ic.traces["w"] = rec.trace(basis, grid, {"operation": "interval-w"})
    res = verify_optimality(ic, b)
    ic.residuals = res
    ic.converged = all(res[k] <= opt_tol for k in ("adjoint", "stationarity", "terminal")) and res["identity"] <= 10 * opt_tol
    return ic


def verify_optimality(ic: IntervalControl, b: PotentialField | None, grid: TimeGrid | None = None) -> dict:
    """Residuals of the discrete optimality system of the interval problem.

    adjoint: the stored adjoint states satisfy mu_k = A_k^T mu_{k+1}, the
    transposed scheme, i.e. the time-reversed discretisation of
    q'' - gamma q' - Delta q + b q = 0, checked with explicitly assembled
    step matrices.  stationarity: Lam^sigma c_k = P_m(chi q_k).  terminal:
    mu_K = -(2/delta) D w(T), whose velocity block is q(T) = -(2/delta) P_N w'(T).
    identity: (2/delta) |P_N Phi_w(T)|^2 + int |P_m(chi q)|_{-sigma}^2 = int (b z, q),
    relative to the larger side.
    """
    if ic.vacuous:
        return {"adjoint": 0.0, "stationarity": 0.0, "terminal": 0.0, "identity": 0.0}
    prob: IntervalProblem = ic.traces["problem"]
    grid = grid or ic.grid
    ops = _SchemeOps(prob.basis, b, prob.gamma, grid)
    n = prob.basis.n_modes
    mu = ic.adjoint
    scale = max(float(np.max(np.abs(mu))), 1e-300)
    K = grid.n_steps
    idx = np.unique(np.linspace(0, K - 1, min(K, 200)).astype(int))
    adj = max(float(np.max(np.abs(mu[k] - ops.step_matrix(k).T @ mu[k + 1]))) for k in idx) / scale
    Xm = prob.space.modal
    lhs = ic.coeffs * prob.lam_m
    rhs = ic.q @ Xm
    stat = float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(rhs)), 1e-300))
    target = -(2.0 / prob.delta) * prob.D * ic.w_final
    qT = -(2.0 / prob.delta) * np.where(np.arange(n) < prob.N, ic.w_final[n:], 0.0)
    term = max(
        float(np.max(np.abs(mu[K] - target)) / max(np.max(np.abs(target)), 1e-300)),
        float(np.max(np.abs(ic.q[K] - qT)) / max(np.max(np.abs(qT)), 1e-300)),
    )
    w = prob.w
    left = (2.0 / prob.delta) * float(ic.w_final @ (prob.D * ic.w_final)) + float(
        np.sum(w[:, None] * (ic.q @ Xm) ** 2 / prob.lam_m)
    )
    right = float(np.sum(w[:, None] * prob.bz * ic.q))
    ident = abs(left - right) / max(abs(left), abs(right), 1e-300)
    return {"adjoint": adj, "stationarity": stat, "terminal": term, "identity": ident}


@dataclass(eq=False)
class ConcatenatedControl:
    intervals: list
    contractions: np.ndarray
    energies: np.ndarray
    times: np.ndarray
    eta_l2_beta: float
    beta_fit: float
    beta_design: float
    final: np.ndarray = field(repr=False)

    def node_table(self) -> np.ndarray:
        """Rows (t, c_1..c_m, |eta|, E_v) over all windows, shared window ends listed once."""
        rows = []
        for i, ic in enumerate(self.intervals):
            k0 = 0 if i == 0 else 1
            t = ic.grid.times[k0:]
            eta = np.linalg.norm(ic.eta[k0:], axis=1)
            rows.append(np.column_stack([t, ic.coeffs[k0:], eta, ic.v_energies[k0:]]))
        return np.vstack(rows)

    def summary(self) -> dict:
        return {
            "contractions": self.contractions.tolist(),
            "E_ratio": float(self.energies[-1] / self.energies[0]) if self.energies[0] > 0 else 0.0,
            "eta_L2_beta": self.eta_l2_beta,
            "beta_fit": self.beta_fit,
            "beta_design": self.beta_design,
        }


def concatenate_control(
    b: PotentialField | None,
    chi: CutoffField,
    init: ModalState,
    T: float,
    K_intervals: int,
    m: int,
    N: int,
    delta_pen: float,
    sigma: float,
    gamma: float,
    dt: float | None = None,
    solver: str = "direct",
) -> ConcatenatedControl:
    """Apply Theta_{kT} window by window from the realised state at kT."""
    from .waveop import default_dt

    if K_intervals < 1:
        raise ValueError("K_intervals must be >= 1")
    basis = chi.basis
    dt = dt or default_dt(basis)
    space = ControlSpace.build(chi, m)
    X = init.vector.copy()
    lam = basis.eigenvalues
    E0 = stacked_energy(lam, X)
    intervals, contractions, energies, times = [], [], [E0], [0.0]
    l2 = []
    for k in range(K_intervals):
        grid = TimeGrid.covering(T, dt, t0=k * T)
        try:
            ic = synthesize_interval_control(b, chi, X, k * T, T, m, N, delta_pen, sigma, gamma, grid, solver, space=space)
        except ControlError as exc:
            raise ControlError(f"interval {k} failed: {exc}") from exc
        intervals.append(ic)
        contractions.append(0.0 if ic.vacuous else ic.contraction)
        w = trapezoid_weights(grid)
        # L2 norm of the realised control eta on this window, weighted by e^{beta t}
        l2.append((grid.t0, float(np.sum(w[:, None] * ic.eta**2))))
        X = ic.v_final
        energies.append(stacked_energy(lam, X))
        times.append((k + 1) * T)
    energies = np.array(energies)
    times = np.array(times)
    beta_d = design_beta(T)
    pos = energies > 0
    beta_fit = float(-np.polyfit(times[pos], np.log(energies[pos]), 1)[0]) if pos.sum() >= 2 else math.inf
    eta_l2b = math.sqrt(max((math.exp(beta_d * t0) * e for t0, e in l2), default=0.0))
    return ConcatenatedControl(intervals, np.array(contractions), energies, times, eta_l2b, beta_fit, beta_d, X)


# ---------------------------------------------------------------- Riccati


def are_hamiltonian(A: np.ndarray, B: np.ndarray, H: np.ndarray, R: np.ndarray | None = None) -> np.ndarray:
    """Stabilising solution of A^T P + P A - P B R^{-1} B^T P + H = 0 via the Hamiltonian eigenbasis."""
    n = A.shape[0]
    R = np.eye(B.shape[1]) if R is None else R
    G = B @ np.linalg.solve(R, B.T)
    Ham = np.block([[A, -G], [-H, -A.T]])
    vals, vecs = scipy.linalg.eig(Ham)
    stable = vecs[:, vals.real < 0]
    if stable.shape[1] != n:
        raise ControlError("Hamiltonian has eigenvalues on the imaginary axis; pair not stabilisable")
    U1, U2 = stable[:n], stable[n:]
    P = np.real(U2 @ np.linalg.inv(U1))
    return 0.5 * (P + P.T)


@dataclass(eq=False)
class FeedbackLaw:
    """Gains K(t_k): stacked state -> control coefficients c in F_m, zeta = K(t) X."""

    times: np.ndarray
    gains: np.ndarray = field(repr=False)
    beta: float
    value_times: np.ndarray
    values: np.ndarray = field(repr=False)
    modal: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)
    gain_bound: float = 0.0
    growth_constant: float = 0.0
    history: list = field(default_factory=list)
    converged: bool = True
    meta: dict = field(default_factory=dict)
    # last (t, gain) pair; a step asks for the same node from several places
    _last: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.gains.shape[1]

    def gain(self, t: float) -> np.ndarray:
        return feedback_gain(self, t)

    def forcing_matrix(self, t: float) -> np.ndarray:
        """n x 2n map from the stacked state to the modal forcing eta."""
        return self.modal @ feedback_gain(self, t)

    def value_matrix(self, t: float) -> np.ndarray:
        """Coefficient-space value matrix P(t) = e^{beta t} Pi(t), cost-to-go 1/2 X^T P X."""
        vt = self.value_times
        if t < vt[0] - 1e-9 or t > vt[-1] + 1e-9:
            raise ValueError(f"t={t} outside the law's value grid")
        i = min(max(int(np.searchsorted(vt, t, side="right")) - 1, 0), max(vt.size - 2, 0))
        if vt.size == 1:
            Pi = self.values[0]
        else:
            th = min(max((t - vt[i]) / (vt[i + 1] - vt[i]), 0.0), 1.0)
            Pi = (1 - th) * self.values[i] + th * self.values[i + 1]
        return math.exp(self.beta * t) * Pi

    def operator_norm(self, t: float) -> float:
        """|Q(t)| as an operator on H (energy space)."""
        s = 1.0 / np.sqrt(np.concatenate([self.lam, np.ones_like(self.lam)]))
        P = self.value_matrix(t)
        return float(np.linalg.norm(s[:, None] * P * s[None, :], 2))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "beta": self.beta,
            "times": self.times.tolist(),
            "m": self.m,
            "gains": self.gains.reshape(self.gains.shape[0], -1).tolist(),
            "gain_bound": self.gain_bound,
            "growth_constant": self.growth_constant,
            "converged": self.converged,
            "extension_history": self.history,
        }

    def certificates(self) -> dict:
        return {
            "beta": self.beta,
            "gain_bound": self.gain_bound,
            "growth_constant": self.growth_constant,
            "converged": self.converged,
            "extension_history": self.history,
            "t_range": [float(self.times[0]), float(self.times[-1])],
        }


def feedback_gain(law: FeedbackLaw, t: float) -> np.ndarray:
    """Gain at time t, linear interpolation between stored nodes."""
    cached = law._last
    if cached is not None and cached[0] == t:
        return cached[1]
    K = _interpolate_gain(law, t)
    law._last = (t, K)
    return K


def _interpolate_gain(law: FeedbackLaw, t: float) -> np.ndarray:
    ts = law.times
    tol = 1e-9 * max(1.0, abs(ts[-1]))
    if t < ts[0] - tol or t > ts[-1] + tol:
        raise ValueError(f"t={t} outside the law's grid [{ts[0]}, {ts[-1]}]")
    if ts.size == 1:
        return law.gains[0]
    i = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), ts.size - 2)
    th = (t - ts[i]) / (ts[i + 1] - ts[i])
    if th <= 1e-12:
        return law.gains[i]
    if th >= 1 - 1e-12:
        return law.gains[i + 1]
    return (1 - th) * law.gains[i] + th * law.gains[i + 1]


class _RiccatiRHS:
    """d Pi / d tau for tau = t_end - t in the weighted problem."""

    def __init__(self, basis: SpectralBasis, b: PotentialField | None, gamma: float, beta: float, modal: np.ndarray):
        self.lam = basis.eigenvalues
        self.n = basis.n_modes
        self.b = None if b is None or b.is_zero else b
        self.gamma, self.beta, self.modal = gamma, beta, modal
        self.H = np.concatenate([self.lam, np.ones(self.n)])

    def stiffness(self, t: float) -> np.ndarray:
        Kt = np.diag(self.lam)
        if self.b is not None:
            Kt = Kt + self.b.matrix_at(t)
        return Kt

    def __call__(self, t: float, Pi: np.ndarray) -> np.ndarray:
        n, g = self.n, self.gamma
        Kt = self.stiffness(t)
        P11, P12, P21, P22 = Pi[:n, :n], Pi[:n, n:], Pi[n:, :n], Pi[n:, n:]
        S = np.block([[-Kt @ P21, -Kt @ P22], [P11 - g * P21, P12 - g * P22]])
        PB = Pi[:, n:] @ self.modal
        out = S + S.T + self.beta * Pi - PB @ PB.T
        out[np.diag_indices(2 * n)] += self.H
        return out

    def gain(self, Pi: np.ndarray) -> np.ndarray:
        return -(self.modal.T @ Pi[self.n :])


def _rk4_sweep(rhs: _RiccatiRHS, Pi: np.ndarray, t_start: float, t_stop: float, h: float, on_node=None):
    """Integrate backward in t from t_start to t_stop (t_stop < t_start) with fixed RK4 steps."""
    steps = max(1, int(math.ceil((t_start - t_stop) / h - 1e-9)))
    h = (t_start - t_stop) / steps
    t = t_start
    if on_node is not None:
        on_node(steps, t, Pi)
    for i in range(steps - 1, -1, -1):
        k1 = rhs(t, Pi)
        k2 = rhs(t - 0.5 * h, Pi + 0.5 * h * k1)
        k3 = rhs(t - 0.5 * h, Pi + 0.5 * h * k2)
        k4 = rhs(t - h, Pi + h * k3)
        Pi = Pi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Pi = 0.5 * (Pi + Pi.T)
        t = t_start - (steps - i) * h
        if not np.all(np.isfinite(Pi)):
            raise ControlError(f"Riccati blow-up at t={t:.6g}")
        if on_node is not None:
            on_node(i, t, Pi)
    return Pi


def riccati_value(
    b: PotentialField | None,
    chi: CutoffField,
    beta: float,
    m: int,
    gamma: float,
    grid: TimeGrid,
    terminal: np.ndarray | str | None = None,
    riccati_tol: float = 1e-8,
    tail: float | None = None,
    max_tail: float | None = None,
    h_scale: float = 0.25,
    store_every: int = 8,
) -> FeedbackLaw:
    """Feedback law of the e^{beta t}-weighted LQ problem on [grid.t0, grid.t_end].

    The weight is absorbed by Pi = e^{-beta t} P, giving an autonomous-form
    DRE with A + beta/2.  Pi is swept backward from t_end + tail with the
    given terminal matrix (zero by default, or "are" for the algebraic
    solution of the time-averaged system); the tail is doubled until Pi at
    the end of the law grid changes by less than ``riccati_tol`` (relative),
    or until ``max_tail`` / the potential's time range is exhausted.

    Law nodes are every ``stride``-th grid node with stride chosen so that
    the RK4 step h satisfies h sqrt(lambda_max) <= h_scale.
    """
    basis = chi.basis
    n = basis.n_modes
    if not beta > 0:
        raise ValueError("beta must be positive")
    space = ControlSpace.build(chi, m)
    rhs = _RiccatiRHS(basis, b, gamma, beta, space.modal)
    stride = max(1, int(math.floor(h_scale / (grid.dt * math.sqrt(basis.lambda_max)) + 1e-9)))
    h = stride * grid.dt
    t_law = grid.t_end
    if b is not None and not b.is_constant and not b.is_zero:
        avail = b.times[-1] - t_law
    else:
        avail = math.inf
    max_tail = min(max_tail if max_tail is not None else 64.0 * grid.T, avail)
    # start short so the doubling history shows the convergence trend
    tail = tail if tail is not None else min(grid.T, max_tail / 8)

    def terminal_matrix():
        if terminal is None:
            return np.zeros((2 * n, 2 * n))
        if isinstance(terminal, str):
            if terminal != "are":
                raise ValueError(f"unknown terminal {terminal!r}")
            Kavg = np.diag(basis.eigenvalues) + (b.average() if b is not None else 0.0)
            A = np.block([[np.zeros((n, n)), np.eye(n)], [-Kavg, -gamma * np.eye(n)]]) + 0.5 * beta * np.eye(2 * n)
            Bc = np.vstack([np.zeros((n, m)), space.modal])
            return are_hamiltonian(A, Bc, np.diag(rhs.H))
        return np.asarray(terminal, dtype=float) * math.exp(-beta * (t_law + tail))

    history = []
    prev = None
    converged = False
    tail_used = tail
    while True:
        Pi_end = _rk4_sweep(rhs, terminal_matrix(), t_law + tail, t_law, h)
        if prev is not None:
            change = float(np.linalg.norm(Pi_end - prev) / max(np.linalg.norm(Pi_end), 1e-300))
            history.append([tail, change])
            if change < riccati_tol:
                converged = True
                tail_used = tail
                break
        prev = Pi_end
        tail_used = tail
        if 2 * tail > max_tail + 1e-12:
            if tail < max_tail - 1e-12:
                tail = max_tail
                continue
            break
        tail *= 2
    if not history:
        history.append([tail_used, math.nan])

    n_law = grid.n_steps // stride
    law_times = grid.t0 + h * np.arange(n_law + 1)
    if law_times[-1] < t_law - 1e-12:
        law_times = np.append(law_times, t_law)
    gains = np.empty((law_times.size, m, 2 * n))
    values, value_times = [], []
    Pi = Pi_end
    gains[-1] = rhs.gain(Pi)
    values.append(Pi.copy())
    value_times.append(law_times[-1])
    # sweep node to node on the law grid, storing gains at every node
    for i in range(law_times.size - 1, 0, -1):
        Pi = _rk4_sweep(rhs, Pi, law_times[i], law_times[i - 1], h)
        gains[i - 1] = rhs.gain(Pi)
        if (i - 1) % store_every == 0:
            values.append(Pi.copy())
            value_times.append(law_times[i - 1])
    values = np.array(values[::-1])
    value_times = np.array(value_times[::-1])
    gain_bound = float(max(np.linalg.norm(G, 2) for G in gains))
    s = 1.0 / np.sqrt(rhs.H)
    if np.any(np.linalg.eigvalsh(values[0]) < -1e-8 * np.abs(values[0]).max()):
        raise ControlError("value matrix lost positive semidefiniteness")
    growth = float(max(np.linalg.norm(s[:, None] * V * s[None, :], 2) for V in values))
    return FeedbackLaw(
        law_times, gains, beta, value_times, values, space.modal, basis.eigenvalues, gain_bound, growth,
        history, converged, {"stride": stride, "rk4_step": h, "tail": tail_used, "gamma": gamma, "m": m},
    )


def zero_law(like: FeedbackLaw) -> FeedbackLaw:
    return FeedbackLaw(
        like.times, np.zeros_like(like.gains), like.beta, like.value_times, np.zeros_like(like.values),
        like.modal, like.lam,
    )


@dataclass(eq=False)
class ClosedLoopLinear:
    trace: SimulationTrace
    cost: float
    controls: np.ndarray = field(repr=False)


def simulate_feedback(
    law: FeedbackLaw,
    b: PotentialField | None,
    init: ModalState | np.ndarray,
    gamma: float,
    grid: TimeGrid,
    basis: SpectralBasis,
    coupling: str = "implicit",
    record_every: int = 1,
) -> ClosedLoopLinear:
    """Gain-driven linearised trajectory and its weighted running cost.

    The cost is 1/2 int e^{beta t} (|v|_1^2 + |v'|^2 + |zeta|^2) dt by the
    trapezoid rule on the integrator nodes.
    """
    X0 = init.vector if isinstance(init, ModalState) else np.asarray(init, dtype=float)
    lam = basis.eigenvalues
    w = trapezoid_weights(grid)
    acc = {"cost": np.zeros(X0.shape[1:]) if X0.ndim > 1 else 0.0}
    ctrl_sq = []

    def feedback(t):
        return law.forcing_matrix(t)

    rec = Recorder(basis, grid, record_every)

    def observe(k, t, X, g):
        rec(k, t, X, g)
        c = feedback_gain(law, t) @ X
        c2 = np.sum(c * c, axis=0)
        ctrl_sq.append(c2)
        acc["cost"] = acc["cost"] + 0.5 * w[k] * math.exp(law.beta * t) * (stacked_energy(lam, X) + c2)

    pforce = None
    if b is not None and not b.is_zero:
        pforce = lambda k, t, v: -(b.matrix_at(t) @ v)  # noqa: E731
    Integrator(basis, gamma, grid.dt).run(X0, grid, pforce, None, feedback, coupling, observe)
    trace = rec.trace(basis, grid, {"operation": "feedback", "coupling": coupling})
    return ClosedLoopLinear(trace, acc["cost"], np.array(ctrl_sq))


def dpp_consistency(
    law: FeedbackLaw,
    b: PotentialField | None,
    V: ModalState,
    s_mid: float,
    gamma: float,
    dt: float,
) -> float:
    """Relative residual of 1/2 V^T P(0) V = cost on [0, s_mid] + 1/2 X(s_mid)^T P(s_mid) X(s_mid).

    s_mid is moved to the nearest node where P is stored: in between, P is
    linearly interpolated, and that error has nothing to do with the split.
    """
    basis = V.basis
    X0 = V.vector
    t0 = float(law.times[0])
    if s_mid > t0:
        s_mid = float(law.value_times[int(np.argmin(np.abs(law.value_times - s_mid)))])
    lhs = 0.5 * float(X0 @ law.value_matrix(t0) @ X0)
    if s_mid <= t0 or not np.any(X0):
        rhs = lhs
    else:
        grid = TimeGrid.covering(s_mid - t0, dt, t0=t0)
        sim = simulate_feedback(law, b, V, gamma, grid, basis, record_every=grid.n_steps)
        X1 = sim.trace.final
        rhs = float(sim.cost) + 0.5 * float(X1 @ law.value_matrix(grid.t_end) @ X1)
    if lhs == 0 and rhs == 0:
        return 0.0
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def fit_decay(times: np.ndarray, energies: np.ndarray, t_from: float | None = None, t_to: float | None = None):
    """Least-squares fit log E = log C - beta t over [t_from, t_to]; returns (C, beta)."""
    times = np.asarray(times)
    E = np.asarray(energies)
    sel = np.ones_like(times, dtype=bool)
    if t_from is not None:
        sel &= times >= t_from - 1e-12
    if t_to is not None:
        sel &= times <= t_to + 1e-12
    sel &= E > 0
    if sel.sum() < 2:
        return math.nan, math.nan
    slope, icpt = np.polyfit(times[sel], np.log(E[sel]), 1)
    return float(math.exp(icpt)), float(-slope)
