"""Nonlinear damped wave dynamics and local feedback stabilisation.

The nonlinear solver shares the exponential trapezoid stepper with the
linear one; the force -P f(u) is evaluated pseudo-spectrally on a padded
sine grid.  Closed-loop runs integrate the difference w = u - u_ref
directly, so small perturbations are not lost to cancellation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .control import FeedbackLaw, fit_decay, feedback_gain
from .spectral import Collocation, ModalState, SpectralBasis
from .waveop import Integrator, PotentialField, Recorder, SimulationTrace, TimeGrid, stacked_energy

BLOWUP_CEILING = 1e8
SAMPLES = 100_000


class NonlinearityError(ValueError):
    def __init__(self, message: str, certificate=None):
        super().__init__(message)
        self.certificate = certificate


def _horner(coef) -> Callable:
    # plain Horner evaluation; Polynomial.__call__ maps domains on every call
    c = [float(x) for x in coef[::-1]]

    def p(u):
        u = np.asarray(u, dtype=float)
        out = np.full_like(u, c[0])
        for a in c[1:]:
            out = out * u + a
        return out

    return p


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """f with its first two derivatives and antiderivative F (F(0) = 0)."""

    name: str
    f: Callable
    df: Callable
    d2f: Callable
    F: Callable
    degree: int | None = None
    coefficients: tuple = ()

    @classmethod
    def polynomial(cls, coefficients, name: str | None = None) -> "Nonlinearity":
        """f(u) = sum_k a_k u^k, coefficients given from a_0 upward."""
        a = np.trim_zeros(np.asarray(coefficients, dtype=float), "b")
        if a.size == 0:
            a = np.zeros(1)
        p = np.polynomial.Polynomial(a)
        dp, d2p, P = p.deriv(), p.deriv(2), p.integ()
        fs = [_horner(q.coef) for q in (p, dp, d2p, P)]
        return cls(name or f"poly{tuple(a.tolist())}", *fs, max(a.size - 1, 1), tuple(a.tolist()))

    @classmethod
    def cubic(cls) -> "Nonlinearity":
        return cls.polynomial([0, 0, 0, 1], "cubic")

    @classmethod
    def cubic_sine(cls) -> "Nonlinearity":
        return cls(
            "cubic+sin",
            lambda u: u**3 + np.sin(u),
            lambda u: 3 * u**2 + np.cos(u),
            lambda u: 6 * u - np.sin(u),
            lambda u: u**4 / 4 + 1 - np.cos(u),
            None,
        )

    @classmethod
    def zero(cls) -> "Nonlinearity":
        return cls.polynomial([0], "zero")

    @property
    def is_zero(self) -> bool:
        return self.degree is not None and not any(self.coefficients)

    def to_dict(self) -> dict:
        return {"name": self.name, "degree": self.degree, "coefficients": list(self.coefficients)}


PRESETS = {"cubic": Nonlinearity.cubic, "cubic+sin": Nonlinearity.cubic_sine, "zero": Nonlinearity.zero}


def nonlinearity_from_spec(spec) -> Nonlinearity:
    if isinstance(spec, Nonlinearity):
        return spec
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ValueError(f"unknown nonlinearity preset {spec!r}; known: {sorted(PRESETS)}")
        return PRESETS[spec]()
    return Nonlinearity.polynomial(spec)


@dataclass
class NonlinearityCertificate:
    passed: bool
    range: float
    constants: dict
    c: float | None
    failures: list = field(default_factory=list)


def validate_nonlinearity(f: Nonlinearity, U: float = 10.0, samples: int = SAMPLES, strict: bool = True):
    """Sampled growth and sign checks on [-U, U].

    Each inequality gets its minimal constant on [-U, U] and again on
    [-2U, 2U]; a constant that keeps growing under the range doubling is
    read as unbounded and the inequality fails.  The constant c in
    f(u) u >= c F(u) - C is the largest value from a fixed ladder for which
    the companion constant stays bounded.
    """
    u1 = np.linspace(-U, U, samples)
    u2 = np.linspace(-2 * U, 2 * U, 2 * samples)

    def stable(a1, a2):
        return a2 <= a1 + 1e-9 * max(1.0, abs(a1)) + 1e-12 or a2 <= 1.05 * a1 and a1 > 0 and a2 - a1 < 0.05 * a1

    checks = {}
    failures = []
    f0 = float(f.f(np.zeros(1))[0])
    if abs(f0) > 1e-14:
        failures.append(("f(0) = 0", [0.0]))
    tests = [
        ("|f'(u)| <= C(1+u^2)", lambda u: np.abs(f.df(u)) / (1 + u**2)),
        ("F(u) >= -C", lambda u: -f.F(u)),
        ("f'(u) >= -C", lambda u: -f.df(u)),
        ("|f''(u)| <= C(1+|u|)", lambda u: np.abs(f.d2f(u)) / (1 + np.abs(u))),
    ]
    for name, g in tests:
        a1, a2 = float(np.max(g(u1))), float(np.max(g(u2)))
        checks[name] = max(a1, 0.0)
        if not stable(a1, a2):
            g2 = g(u2)
            failures.append((name, u2[np.argsort(g2)[-5:]].tolist()))
    c_best = None
    for c in (4.0, 3.0, 2.0, 1.0, 0.5, 0.25, 0.1):
        g = lambda u: c * f.F(u) - f.f(u) * u  # noqa: E731
        a1, a2 = float(np.max(g(u1))), float(np.max(g(u2)))
        if stable(a1, a2):
            c_best = c
            checks["f(u)u >= cF(u) - C"] = max(a1, 0.0)
            break
    if c_best is None:
        failures.append(("f(u)u >= cF(u) - C", []))
    cert = NonlinearityCertificate(not failures, U, checks, c_best, failures)
    if strict and failures:
        raise NonlinearityError(f"{f.name}: fails {failures[0][0]}", cert)
    return cert


@dataclass(frozen=True, eq=False)
class ForcingField:
    """Time-sampled modal forcing h(t); linear interpolation between samples."""

    basis: SpectralBasis
    times: np.ndarray
    coeffs: np.ndarray = field(repr=False)

    @classmethod
    def zero(cls, basis: SpectralBasis) -> "ForcingField":
        return cls(basis, np.zeros(1), np.zeros((1, basis.n_modes)))

    @classmethod
    def from_function(cls, basis: SpectralBasis, h: Callable, times) -> "ForcingField":
        """Project h(t, x) (x the (Q, d) node array) at each sample time."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        vals = np.stack([np.asarray(h(t, basis.quad_nodes), dtype=float).reshape(-1) for t in times])
        return cls(basis, times, vals @ (basis.values * basis.quad_weights).T)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def __call__(self, t: float) -> np.ndarray:
        ts = self.times
        if ts.size == 1:
            return self.coeffs[0]
        if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise ValueError(f"t={t} outside the forcing's time range")
        i = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), ts.size - 2)
        th = min(max((t - ts[i]) / (ts[i + 1] - ts[i]), 0.0), 1.0)
        return (1 - th) * self.coeffs[i] + th * self.coeffs[i + 1]

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        return np.stack([self(t) for t in grid.times])

    def time_derivative_bound(self) -> float:
        if self.times.size < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.coeffs, axis=0)) / np.diff(self.times)[:, None]))


def collocation_for(f: Nonlinearity, basis: SpectralBasis) -> Collocation:
    return Collocation(basis, degree=f.degree if f.degree is not None else 3)


def _projected(f: Callable, col: Collocation, v: np.ndarray) -> np.ndarray:
    return col.from_grid(f(col.to_grid(v)))


def solve_nlw(
    f: Nonlinearity,
    gamma: float,
    h_forcing: ForcingField | np.ndarray | None,
    eta: np.ndarray | Callable | None,
    init: ModalState,
    grid: TimeGrid,
    record_every: int = 1,
    ceiling: float = BLOWUP_CEILING,
    collocation: Collocation | None = None,
) -> SimulationTrace:
    """u'' + gamma u' - Delta u + f(u) = h + eta on the truncation.

    The trace carries the nonlinear energy E_u + 2 int F(u) at recorded
    states in ``meta['hamiltonian']``; on blow-up (E above ``ceiling``) the
    partial trace is returned with ``meta['blowup']`` set.
    """
    basis = init.basis
    n = basis.n_modes
    col = collocation or collocation_for(f, basis)
    forcing = 0.0
    if isinstance(h_forcing, ForcingField):
        if not h_forcing.is_zero:
            forcing = h_forcing.on_grid(grid)
    elif h_forcing is not None:
        forcing = np.asarray(h_forcing, dtype=float)
    if eta is not None:
        e = eta if not callable(eta) else np.stack([eta(k) for k in range(grid.n_steps + 1)])
        forcing = forcing + np.asarray(e, dtype=float)
    forcing = None if np.isscalar(forcing) else forcing
    pforce = None if f.is_zero else (lambda k, t, v: -_projected(f.f, col, v))
    rec = Recorder(basis, grid, record_every)
    ham = []

    class _Blowup(Exception):
        pass

    def observe(k, t, X, g):
        rec(k, t, X, g)
        if rec.index and rec.index[-1] == k and len(ham) < len(rec.index):
            pot = 0.0 if f.is_zero else 2.0 * float(col.integrate(f.F(col.to_grid(X[:n]))))
            ham.append(rec.energies[-1] + pot)
        if not np.isfinite(rec.energies[-1]) or rec.energies[-1] > ceiling:
            raise _Blowup

    blowup = False
    try:
        Integrator(basis, gamma, grid.dt).run(init.vector, grid, pforce, forcing, observer=observe)
    except _Blowup:
        blowup = True
    meta = {"operation": "solve_nlw", "nonlinearity": f.name, "gamma": gamma, "blowup": blowup,
            "hamiltonian": np.array(ham)}
    return rec.trace(basis, grid, meta)


@dataclass(eq=False)
class ReferenceTrajectory:
    trace: SimulationTrace
    bound: float
    first_half_bound: float
    growth: bool
    blowup: bool

    def report(self) -> dict:
        return {"bound": self.bound, "first_half_bound": self.first_half_bound, "growth": self.growth,
                "blowup": self.blowup, "t_end": float(self.trace.state_times[-1])}


def reference_trajectory(
    f: Nonlinearity,
    gamma: float,
    h_forcing: ForcingField | None,
    init: ModalState,
    grid: TimeGrid,
    record_every: int = 1,
    growth_factor: float = 1.5,
) -> ReferenceTrajectory:
    """Reference path u_ref with the measured sup_t |u|_2 + |u'|_1 (Lambda-weighted norms)."""
    tr = solve_nlw(f, gamma, h_forcing, None, init, grid, record_every)
    lam = init.basis.eigenvalues
    n = lam.size
    S = tr.states
    norms = np.sqrt(np.sum(lam**2 * S[:, :n] ** 2, axis=1)) + np.sqrt(np.sum(lam * S[:, n:] ** 2, axis=1))
    half = max(1, norms.size // 2)
    first, whole = float(norms[:half].max()), float(norms.max())
    growth = bool(tr.meta["blowup"] or whole > growth_factor * max(first, 1e-300) and first > 0)
    return ReferenceTrajectory(tr, whole, first, growth, tr.meta["blowup"])


def linearize(f: Nonlinearity, trace: SimulationTrace, stride: int = 1) -> PotentialField:
    """b(t, .) = f'(u_ref(t, .)) as Galerkin matrices at the recorded states (every ``stride``-th)."""
    basis = trace.basis
    n = basis.n_modes
    S = trace.states[::stride]
    times = trace.state_times[::stride]
    if (trace.states.shape[0] - 1) % stride:
        S = np.vstack([S, trace.states[-1:]])
        times = np.append(times, trace.state_times[-1])
    u_nodes = S[:, :n] @ basis.values
    return PotentialField.from_node_values(basis, times, f.df(u_nodes), regularity=1)


@dataclass(eq=False)
class ReferencePath:
    """Reference states at every integrator node of a grid, with their collocation values."""

    basis: SpectralBasis
    grid: TimeGrid
    states: np.ndarray = field(repr=False)
    grid_values: np.ndarray = field(repr=False)

    @classmethod
    def from_trace(cls, trace: SimulationTrace, grid: TimeGrid, col: Collocation) -> "ReferencePath":
        k0 = int(round((grid.t0 - trace.grid.t0) / trace.grid.dt))
        idx = trace.state_index
        if abs(grid.dt - trace.grid.dt) > 1e-14 or np.any(np.diff(idx) != 1):
            raise ValueError("reference trace must store every node at the closed-loop step")
        S = trace.states[k0 : k0 + grid.n_steps + 1]
        if S.shape[0] != grid.n_steps + 1:
            raise ValueError("reference trace does not cover the closed-loop grid")
        n = trace.basis.n_modes
        vals = col.to_grid(S[:, :n].T)
        return cls(trace.basis, grid, S, vals)


def _difference_force(f: Nonlinearity, col: Collocation, ref: ReferencePath):
    """-P[f(u_ref + w) - f(u_ref)] at node k for (batched) positions w."""
    n_ax = len(col.shape)

    def force(k, t, v):
        base = ref.grid_values[..., k]
        w = col.to_grid(v)
        if w.ndim > n_ax:
            base = base.reshape(base.shape + (1,) * (w.ndim - n_ax))
        return -col.from_grid(f.f(base + w) - f.f(base))

    return force


@dataclass(eq=False)
class ClosedLoopResult:
    times: np.ndarray
    energies: np.ndarray
    control_norms: np.ndarray
    controls: np.ndarray | None = field(repr=False)
    differences: np.ndarray | None = field(repr=False)
    ref_energies: np.ndarray | None = field(repr=False, default=None)
    u_energies: np.ndarray | None = field(repr=False, default=None)
    C_fit: float = math.nan
    beta_fit: float = math.nan
    beta_design: float = math.nan
    epsilon: float = 0.0
    blowup: bool = False
    success: bool = False
    fit_window: tuple = ()

    def summary(self) -> dict:
        return {"epsilon": self.epsilon, "C_fit": self.C_fit, "beta_fit": self.beta_fit,
                "beta_design": self.beta_design, "success": bool(self.success), "blowup": bool(self.blowup),
                "E_final": float(np.max(self.energies[-1])) if self.energies.size else 0.0}


def closed_loop(
    f: Nonlinearity,
    gamma: float,
    ref: ReferencePath,
    law: FeedbackLaw | None,
    perturbation: ModalState | np.ndarray,
    fit_from: float | None = None,
    coupling: str = "implicit",
    ceiling: float = BLOWUP_CEILING,
    keep_states: bool = False,
    col: Collocation | None = None,
    success_factor: float = 0.8,
) -> ClosedLoopResult:
    """u = u_ref + w with eta = K(t) Phi_w(t); ``perturbation`` may be a (2n, B) batch.

    ``law=None`` gives the uncontrolled (zero-gain) run.  Success requires
    every member to finish below the blow-up ceiling with a fitted decay rate
    of log E_w over [fit_from, t_end] of at least ``success_factor`` times
    the design rate.
    """
    basis, grid = ref.basis, ref.grid
    n = basis.n_modes
    col = col or collocation_for(f, basis)
    X0 = perturbation.vector if isinstance(perturbation, ModalState) else np.asarray(perturbation, float)
    lam = basis.eigenvalues
    pforce = None if f.is_zero else _difference_force(f, col, ref)
    feedback = None if law is None else law.forcing_matrix
    energies, u_energies, cnorm, ctrl, diffs = [], [], [], [], []

    class _Blowup(Exception):
        pass

    def observe(k, t, X, g):
        E = stacked_energy(lam, X)
        energies.append(E)
        R = ref.states[k]
        u_energies.append(stacked_energy(lam, X + (R[:, None] if X.ndim == 2 else R)))
        if law is not None:
            c = feedback_gain(law, t) @ X
            cnorm.append(np.sqrt(np.sum(c * c, axis=0)))
            if keep_states:
                ctrl.append(law.modal @ c)
        else:
            cnorm.append(np.zeros_like(E))
        if keep_states:
            diffs.append(np.array(X, copy=True))
        if not np.all(np.isfinite(E)) or np.max(E) > ceiling:
            raise _Blowup

    blowup = False
    try:
        Integrator(basis, gamma, grid.dt).run(X0, grid, pforce, None, feedback, coupling, observe)
    except _Blowup:
        blowup = True
    times = grid.times[: len(energies)]
    energies = np.array(energies)
    beta_d = law.beta if law is not None else math.nan
    fit_from = grid.t0 + 0.5 * grid.T if fit_from is None else fit_from
    eps = float(np.sqrt(np.max(stacked_energy(lam, X0)))) if X0.size else 0.0
    C_fit = beta_fit = math.nan
    success = False
    if not blowup and eps > 0:
        if energies.ndim == 1:
            C_fit, beta_fit = fit_decay(times, energies, fit_from)
        else:
            fits = [fit_decay(times, energies[:, j], fit_from) for j in range(energies.shape[1])]
            j = int(np.argmin([b for _, b in fits]))
            C_fit, beta_fit = fits[j]
        success = bool(np.isfinite(beta_fit) and beta_fit >= success_factor * beta_d)
    elif not blowup:
        success = True
    ref_E = stacked_energy(lam, ref.states[: len(energies)].T)
    return ClosedLoopResult(
        times, energies, np.array(cnorm), np.array(ctrl) if keep_states and law is not None else None,
        np.array(diffs) if keep_states else None, ref_E, np.array(u_energies), C_fit, beta_fit, beta_d, eps,
        blowup, success, (fit_from, float(times[-1]) if times.size else math.nan),
    )


def random_perturbations(basis: SpectralBasis, eps: float, count: int, rng: np.random.Generator,
                         decay: float = 1.0) -> np.ndarray:
    """(2n, count) batch of smooth random states with H-norm exactly eps."""
    n = basis.n_modes
    lam = basis.eigenvalues
    Z = rng.standard_normal((2 * n, count))
    Z[:n] /= np.sqrt(lam)[:, None] * (1 + np.arange(n))[:, None] ** decay
    Z[n:] /= (1 + np.arange(n))[:, None] ** decay
    norms = np.sqrt(stacked_energy(lam, Z))
    return eps * Z / norms


@dataclass(eq=False)
class EpsilonSearch:
    epsilon: float
    history: list
    result: ClosedLoopResult | None
    baseline: ClosedLoopResult | None
    perturbations: np.ndarray = field(repr=False)


def find_epsilon(
    f: Nonlinearity,
    gamma: float,
    ref: ReferencePath,
    law: FeedbackLaw,
    rng: np.random.Generator,
    count: int = 20,
    eps0: float = 1e-2,
    eps_max: float = 10.0,
    bisections: int = 4,
    fit_from: float | None = None,
    coupling: str = "implicit",
) -> EpsilonSearch:
    """Largest tested eps for which every one of ``count`` perturbations of norm eps succeeds.

    Directions are drawn once; eps is doubled from ``eps0`` while the
    ensemble succeeds, then bisected between the last success and the
    first failure.  If eps0 itself fails it is halved until success.
    """
    col = collocation_for(f, ref.basis)
    D = random_perturbations(ref.basis, 1.0, count, rng)

    def trial(eps):
        r = closed_loop(f, gamma, ref, law, eps * D, fit_from, coupling, col=col)
        history.append({"epsilon": eps, "success": bool(r.success), "beta_fit": r.beta_fit, "blowup": r.blowup})
        return r

    history = []
    eps = eps0
    r = trial(eps)
    while not r.success and eps > eps0 * 2.0**-20:
        eps /= 2
        r = trial(eps)
    if not r.success:
        return EpsilonSearch(0.0, history, None, None, D)
    good, good_r, bad = eps, r, None
    while good * 2 <= eps_max:
        r = trial(good * 2)
        if not r.success:
            bad = good * 2
            break
        good, good_r = good * 2, r
    if bad is not None:
        for _ in range(bisections):
            mid = math.sqrt(good * bad)
            r = trial(mid)
            if r.success:
                good, good_r = mid, r
            else:
                bad = mid
    base = closed_loop(f, gamma, ref, None, good * D, fit_from, coupling, col=col)
    return EpsilonSearch(good, history, good_r, base, good * D)


@dataclass(eq=False)
class PicardReport:
    ratios: list
    distances: list
    theta: list
    fixed_point: np.ndarray = field(repr=False)
    converged: bool = False
    diverged: bool = False


def z_norm(states: np.ndarray, times: np.ndarray, lam: np.ndarray, beta: float) -> float:
    """sup_t (e^{beta t} E(t))^{1/2} over node states (rows)."""
    E = stacked_energy(lam, states.T)
    return float(np.sqrt(np.max(np.exp(beta * times) * E)))


def picard_probe(
    f: Nonlinearity,
    gamma: float,
    ref: ReferencePath,
    law: FeedbackLaw,
    b: PotentialField,
    perturbation: ModalState,
    iterations: int = 20,
    tol: float = 1e-12,
    coupling: str = "implicit",
) -> PicardReport:
    """Iterate w <- Xi w, with Xi w the gain-driven linear solve forced by -g(w).

    g(w) = P[f(u_ref + w) - f(u_ref)] - B w is evaluated on the previous
    iterate at every node; iterate 0 is the gain-driven linear solution.
    Distances are in the sup-weighted Z norm.
    """
    basis, grid = ref.basis, ref.grid
    n = basis.n_modes
    lam = basis.eigenvalues
    col = collocation_for(f, basis)
    X0 = perturbation.vector
    times = grid.times
    chunk = 1024

    def Bk(k):
        return b.matrices[0] if b.is_constant else b.matrix_at(times[k])

    def xi(forcing):
        rec = Recorder(basis, grid)
        Integrator(basis, gamma, grid.dt).run(
            X0, grid, lambda k, t, v: -(Bk(k) @ v), forcing, law.forcing_matrix, coupling, rec
        )
        return np.array(rec.states)

    def g_of(W):
        wv = col.to_grid(W[:, :n].T)
        diff = col.from_grid(f.f(ref.grid_values + wv) - f.f(ref.grid_values)).T
        if b.is_constant:
            return diff - W[:, :n] @ Bk(0).T
        # B at every node would not fit in memory on long grids
        for k0 in range(0, times.size, chunk):
            ks = range(k0, min(k0 + chunk, times.size))
            Bc = np.stack([Bk(k) for k in ks])
            diff[k0 : k0 + len(ks)] -= np.einsum("kij,kj->ki", Bc, W[k0 : k0 + len(ks), :n])
        return diff

    W = xi(None)
    E0 = max(float(stacked_energy(lam, X0)), 1e-300)
    ratios, dists, thetas = [], [], []
    prev_d = None
    bad_run = 0
    converged = diverged = False
    for _ in range(iterations):
        W_new = xi(-g_of(W))
        d = z_norm(W_new - W, times, lam, law.beta)
        dists.append(d)
        thetas.append(float(np.max(np.exp(law.beta * times) * stacked_energy(lam, W_new.T)) / E0))
        if prev_d is not None and prev_d > 0:
            ratios.append(d / prev_d)
            bad_run = bad_run + 1 if ratios[-1] > 1 else 0
        W, prev_d = W_new, d
        scale = z_norm(W, times, lam, law.beta)
        if d <= tol * max(scale, 1e-300):
            converged = True
            break
        if bad_run >= 3:
            diverged = True
            break
    return PicardReport(ratios, dists, thetas, W, converged, diverged)
