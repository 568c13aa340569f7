"""Observation Gramians, observability constants and HUM null controls.

The observed system is v'' - gamma v' - Delta v + b v = 0 (note the sign of
the damping) and the observation is chi v measured in H^{-sigma}.  Every
Gramian here is assembled from one batched solve of the identity data, with
the same trapezoidal weights in time as the integrator, so discrete
identities hold to rounding rather than to O(dt^2).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .spectral import CutoffField, ModalState, SpectralBasis, pair_weights
from .waveop import Integrator, ModeFlow, PotentialField, TimeGrid, growth_rate, solve_linear

EIGEN_TOL = 1e-10
CHUNK = 256


class ObservabilityError(RuntimeError):
    """Raised when an observability computation cannot produce a valid result."""


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_steps + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def _check_grid(grid: TimeGrid, T: float) -> None:
    if abs(grid.t0) > 1e-12 or abs(grid.T - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"grid must cover [0, {T}], got [{grid.t0}, {grid.t_end}]")


def config_hash(**items) -> str:
    def clean(v):
        if isinstance(v, np.ndarray):
            return hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()[:16]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    blob = json.dumps({k: clean(v) for k, v in sorted(items.items())}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cutoff_matrix(chi, basis: SpectralBasis) -> np.ndarray:
    if isinstance(chi, CutoffField):
        if chi.basis is not basis:
            raise ValueError("cutoff and potential live on different bases")
        return chi.matrix()
    return np.asarray(chi, dtype=float)


@dataclass(eq=False)
class GramianReport:
    T: float
    sigma: float
    gamma: float
    matrix: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)
    lambda_min: float
    lambda_max: float
    M6: float
    t_min: float
    config_hash: str
    row_pieces: np.ndarray | None = field(default=None, repr=False)
    propagator: np.ndarray | None = field(default=None, repr=False)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.M6)

    @property
    def certified(self) -> bool:
        """Positivity certificate: finite constant with T above the geometric threshold."""
        return self.finite and self.T > self.t_min

    def summary(self) -> dict:
        return {
            "T": self.T,
            "sigma": self.sigma,
            "gamma": self.gamma,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "M6": self.M6 if self.finite else "inf",
            "T_min": self.t_min,
            "certified": self.certified,
            "config_hash": self.config_hash,
        }


def _generalized_spectrum(G: np.ndarray, weights: np.ndarray) -> np.ndarray:
    s = 1.0 / np.sqrt(weights)
    Gs = s[:, None] * G * s[None, :]
    try:
        return scipy.linalg.eigh(0.5 * (Gs + Gs.T), eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        cond = float(weights.max() / weights.min())
        raise ObservabilityError(f"eigen-solve failed (weight condition number {cond:.3e})") from exc


def _constant_from_spectrum(mu: np.ndarray, tol: float) -> tuple[float, float, float]:
    mu_max = float(mu[-1]) if mu.size else 0.0
    mu_min = float(mu[0]) if mu.size else 0.0
    if mu_max <= 0.0 or mu_min <= tol * mu_max:
        return mu_min, mu_max, math.inf
    return mu_min, mu_max, 1.0 / mu_min


def gramian(
    b: PotentialField | None,
    chi,
    T: float,
    sigma: float,
    gamma: float,
    grid: TimeGrid,
    basis: SpectralBasis | None = None,
    eigen_tol: float = EIGEN_TOL,
) -> GramianReport:
    """Observation Gramian of chi v in H^{-sigma} over [0, T].

    G = sum_k w_k A_k^T X_chi Lam^{-sigma} X_chi A_k with A_k the map from
    initial data to v(t_k).  The spectrum is taken relative to the
    H^{-sigma} x H^{-sigma-1} inner product and M6 = 1 / lambda_min.
    Per-mode pieces of the observation are kept so that projected Gramians
    (observation through P_m) are available without re-solving.
    """
    basis = basis or (chi.basis if isinstance(chi, CutoffField) else b.basis)
    _check_grid(grid, T)
    n = basis.n_modes
    Xchi = _cutoff_matrix(chi, basis)
    pforce = None
    if b is not None and not b.is_zero:
        pforce = lambda k, t, v: -(b.matrix_at(t) @ v)  # noqa: E731
    w = trapezoid_weights(grid)
    pieces = np.zeros((n, 2 * n, 2 * n))
    buf = []

    def flush():
        if buf:
            O = np.stack([o for o, _ in buf], axis=1)  # (n, chunk, 2n)
            wk = np.array([c for _, c in buf])
            pieces[:] += np.matmul(np.swapaxes(O * wk[None, :, None], 1, 2), O)
            buf.clear()

    def observe(k, t, X, g):
        buf.append((Xchi @ X[:n], w[k]))
        if len(buf) >= CHUNK:
            flush()

    final = Integrator(basis, -gamma, grid.dt).run(np.eye(2 * n), grid, pforce, observer=observe)
    flush()
    lam = basis.eigenvalues
    G = np.tensordot(lam**-sigma, pieces, axes=1)
    G = 0.5 * (G + G.T)
    weights = pair_weights(basis, -sigma)
    mu = _generalized_spectrum(G, weights)
    mu_min, mu_max, M6 = _constant_from_spectrum(mu, eigen_tol)
    h = config_hash(
        T=T, sigma=sigma, gamma=gamma, dt=grid.dt, n=n, domain=basis.domain.to_dict(), chi=Xchi,
        b=None if b is None else b.matrices,
    )
    return GramianReport(T, sigma, gamma, G, weights, mu, mu_min, mu_max, M6, basis.domain.t_min, h, pieces, final)


def observability_constant(report: GramianReport) -> float:
    return report.M6


@dataclass(eq=False)
class TruncatedObsReport:
    N: int
    m: int
    spectrum: np.ndarray = field(repr=False)
    constant: float
    full_constant: float
    ratio: float
    converged: bool
    leakage: float
    subspace: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        f = lambda x: x if math.isfinite(x) else "inf"  # noqa: E731
        return {
            "N": self.N,
            "m": self.m,
            "M6_truncated": f(self.constant),
            "M6_full": f(self.full_constant),
            "ratio": f(self.ratio),
            "converged": self.converged,
            "terminal_leakage": self.leakage,
        }


def constrained_subspace(
    b: PotentialField | None, T: float, gamma: float, N: int, grid: TimeGrid, basis: SpectralBasis
) -> np.ndarray:
    """Initial data whose solution of the observed system ends in H_N x H_N at time T.

    Columns are the back-propagated images of the 2N unit terminal states,
    obtained by solving the time-reversed problem u(tau) = v(T - tau),
    which is u'' + gamma u' - Delta u + b(T - tau) u = 0.
    """
    n = basis.n_modes
    if not 1 <= N <= n:
        raise ValueError(f"N={N} outside [1, {n}]")
    U0 = np.zeros((2 * n, 2 * N))
    U0[np.arange(N), np.arange(N)] = 1.0
    U0[n + np.arange(N), N + np.arange(N)] = -1.0
    rev = None if b is None else b.reversed(T)
    trace = solve_linear(rev, None, U0, gamma, grid, basis=basis, record_every=grid.n_steps)
    Y = trace.final.copy()
    Y[n:] *= -1.0
    c = growth_rate(basis, gamma, rev)
    E0, E1 = trace.energies[0], trace.energies[-1]
    if np.any(~np.isfinite(Y)) or np.any(np.log(E1) > np.log(E0) + 2 * c * T + 1e-6):
        raise ObservabilityError("back-propagation exceeded the exponential growth bound")
    return Y


def _restricted_constant(G: np.ndarray, weights: np.ndarray, Y: np.ndarray, tol: float):
    # W-orthonormal basis of span(Y), then a standard symmetric eigenproblem
    Q, R = np.linalg.qr(np.sqrt(weights)[:, None] * Y)
    keep = np.abs(np.diag(R)) > 1e-12 * np.abs(np.diag(R)).max()
    Q = Q[:, keep]
    Z = Q / np.sqrt(weights)[:, None]
    Gr = Z.T @ G @ Z
    mu = scipy.linalg.eigh(0.5 * (Gr + Gr.T), eigvals_only=True)
    return mu, _constant_from_spectrum(mu, tol)[2]


def projected_gramian(report: GramianReport, m: int, basis: SpectralBasis) -> np.ndarray:
    if report.row_pieces is None:
        raise ValueError("report was built without per-mode pieces")
    lam = basis.eigenvalues[:m]
    return np.tensordot(lam ** -report.sigma, report.row_pieces[:m], axes=1)


def truncated_constant(
    b: PotentialField | None,
    chi,
    T: float,
    sigma: float,
    gamma: float,
    N: int,
    m: int,
    grid: TimeGrid,
    basis: SpectralBasis | None = None,
    full: GramianReport | None = None,
    subspace: np.ndarray | None = None,
    eigen_tol: float = EIGEN_TOL,
) -> TruncatedObsReport:
    """Constant of the inequality with observation P_m(chi v), for Phi_v(T) in H_N x H_N."""
    basis = basis or (chi.basis if isinstance(chi, CutoffField) else b.basis)
    n = basis.n_modes
    if not (1 <= m <= n and 1 <= N <= n):
        raise ValueError(f"need 1 <= m, N <= {n}")
    full = full or gramian(b, chi, T, sigma, gamma, grid, basis, eigen_tol)
    Y = subspace if subspace is not None else constrained_subspace(b, T, gamma, N, grid, basis)
    Gm = projected_gramian(full, m, basis)
    mu, const = _restricted_constant(Gm, full.weights, Y, eigen_tol)
    leakage = 0.0
    if full.propagator is not None:
        end = full.propagator @ Y
        tail = np.concatenate([end[N:n], end[n + N :]])
        leakage = float(np.linalg.norm(tail) / max(np.linalg.norm(end), 1e-300))
    ratio = const / full.M6 if full.finite else math.nan
    return TruncatedObsReport(N, m, mu, const, full.M6, ratio, leakage < 1e-3, leakage, Y)


@dataclass(eq=False)
class SelectMResult:
    m: int
    N: int
    factor: float
    truncated: TruncatedObsReport
    full_constant: float
    history: list = field(default_factory=list)

    def summary(self) -> dict:
        out = self.truncated.summary()
        out.update({"factor": self.factor, "history": [[m, c if math.isfinite(c) else "inf"] for m, c in self.history]})
        return out


def select_m(
    b: PotentialField | None,
    chi,
    T: float,
    sigma: float,
    gamma: float,
    N: int,
    grid: TimeGrid,
    factor: float = 2.0,
    basis: SpectralBasis | None = None,
    full: GramianReport | None = None,
    eigen_tol: float = EIGEN_TOL,
) -> SelectMResult:
    """Smallest m whose truncated constant is within ``factor`` of the full constant."""
    basis = basis or (chi.basis if isinstance(chi, CutoffField) else b.basis)
    full = full or gramian(b, chi, T, sigma, gamma, grid, basis, eigen_tol)
    if not full.finite:
        raise ObservabilityError("full observability constant is infinite")
    Y = constrained_subspace(b, T, gamma, N, grid, basis)
    history = []
    for m in range(1, basis.n_modes + 1):
        rep = truncated_constant(b, chi, T, sigma, gamma, N, m, grid, basis, full, Y, eigen_tol)
        history.append((m, rep.constant))
        if rep.constant <= factor * full.M6:
            return SelectMResult(m, N, factor, rep, full.M6, history)
    raise ObservabilityError(f"no m <= {basis.n_modes} meets factor {factor}; truncation too small")


@dataclass(eq=False)
class HumResult:
    zeta: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    terminal: np.ndarray = field(repr=False)
    residual: float
    control_norm: float
    init_norm: float
    bound: float
    M6: float
    grid: TimeGrid = field(repr=False)


def hum_control(
    init: ModalState,
    chi,
    T: float,
    sigma: float,
    grid: TimeGrid,
    eigen_tol: float = EIGEN_TOL,
) -> HumResult:
    """Minimal-norm control zeta with u'' - Delta u = chi zeta steering init to rest at T.

    The problem is posed for the discrete scheme itself: the terminal state is
    linear in the node values zeta_k, the cost is sum_k w_k |zeta_k|_sigma^2,
    and the minimiser is zeta_k = Lam^{-sigma} X_chi J^T E(T - t_k)^T p with
    W_c p = -S(T) init for the discrete controllability Gramian W_c.
    """
    basis = init.basis
    _check_grid(grid, T)
    n = basis.n_modes
    lam = basis.eigenvalues
    Xchi = _cutoff_matrix(chi, basis)
    w = trapezoid_weights(grid)
    times = grid.times
    obs = gramian(None, chi, T, sigma, 0.0, grid, basis, eigen_tol)

    # columns E(T - t_k) J, i.e. the (a12, a22) blocks of the exact flow
    a12 = np.empty((grid.n_steps + 1, n))
    a22 = np.empty_like(a12)
    for k, t in enumerate(times):
        fl = ModeFlow(lam, 0.0, T - t)
        a12[k], a22[k] = fl.a12, fl.a22
    C = Xchi * (lam**-sigma)[None, :] @ Xchi
    Wc = np.zeros((2 * n, 2 * n))
    for k in range(grid.n_steps + 1):
        D = np.concatenate([a12[k][:, None] * np.eye(n), a22[k][:, None] * np.eye(n)])
        Wc += w[k] * D @ C @ D.T
    Wc = 0.5 * (Wc + Wc.T)
    target = -ModeFlow(lam, 0.0, T).apply(init.vector)
    scale = pair_weights(basis, sigma + 1)
    s = np.sqrt(scale)
    mu = np.linalg.eigvalsh(s[:, None] * Wc * s[None, :])
    if mu[-1] <= 0 or mu[0] <= eigen_tol * mu[-1]:
        raise ObservabilityError("controllability Gramian is singular")
    p = np.linalg.solve(Wc, target)
    pv, pp = p[:n], p[n:]
    zeta = ((a12 * pv + a22 * pp) @ Xchi) * (lam**-sigma)[None, :]
    eta = zeta @ Xchi
    trace = solve_linear(None, eta, init, 0.0, grid, record_every=grid.n_steps)
    terminal = trace.final
    init_norm = math.sqrt(float(np.sum(scale * init.vector**2)))
    term_norm = math.sqrt(float(np.sum(scale * terminal**2)))
    control_norm = math.sqrt(float(np.sum(w[:, None] * zeta**2 * lam[None, :] ** sigma)))
    residual = term_norm / init_norm if init_norm > 0 else term_norm
    bound = math.sqrt(obs.M6) * init_norm if obs.finite else math.inf
    return HumResult(zeta, eta, terminal, residual, control_norm, init_norm, bound, obs.M6, grid)
