"""Linear damped wave dynamics in eigen-coordinates.

States are stacked vectors ``X = [v; v_dot]`` of length ``2n`` (or arrays of
shape ``(2n, B)`` holding ``B`` independent states).  Each step applies the
exact per-mode flow of ``v'' + gamma v' + lambda v = 0`` and treats the
remaining forcing ``g = eta - B v (+ feedback)`` by the trapezoidal rule on
the Duhamel integral.  Because the forcing enters only the velocity and the
potential acts only on the position, the scheme is explicit except for the
velocity part of a state feedback, which costs one small linear solve.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .spectral import ModalState, SpectralBasis

DT_FACTOR = 20.0


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    @classmethod
    def covering(cls, T: float, dt_max: float, t0: float = 0.0) -> "TimeGrid":
        """Uniform grid on [t0, t0 + T] with step <= dt_max hitting T exactly."""
        n = max(1, int(math.ceil(T / dt_max - 1e-9)))
        return cls(t0, T / n, n)

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    @property
    def t_end(self) -> float:
        return self.t0 + self.T

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        k = (t - self.t0) / self.dt
        i = int(round(k))
        if abs(k - i) > 1e-6 or not 0 <= i <= self.n_steps:
            raise ValueError(f"t={t} is not a node of the grid")
        return i

    def sub(self, k0: int, k1: int) -> "TimeGrid":
        return TimeGrid(self.t0 + k0 * self.dt, self.dt, k1 - k0)


def default_dt(basis: SpectralBasis) -> float:
    return 1.0 / (DT_FACTOR * math.sqrt(basis.lambda_max))


class ModeFlow:
    """Exact flow over time t of v'' + gamma v' + lambda v = 0, one 2x2 block per mode.

    Over- and under-damped modes and the critical case are handled by the
    same formulas with c, s = cos/sin, cosh/sinh or 1, t; valid for any sign
    of gamma and t.
    """

    def __init__(self, lam: np.ndarray, gamma: float, t: float):
        lam = np.asarray(lam, dtype=float)
        a = 0.5 * gamma
        w2 = lam - a * a
        x = w2 * t * t
        c = np.empty_like(lam)
        s = np.empty_like(lam)
        small = np.abs(x) < 1e-6
        pos = (~small) & (w2 > 0)
        neg = (~small) & (w2 < 0)
        w = np.sqrt(np.abs(w2))
        c[pos] = np.cos(w[pos] * t)
        s[pos] = np.sin(w[pos] * t) / w[pos]
        c[neg] = np.cosh(w[neg] * t)
        s[neg] = np.sinh(w[neg] * t) / w[neg]
        xs = x[small]
        c[small] = 1.0 - xs / 2 + xs * xs / 24
        s[small] = t * (1.0 - xs / 6 + xs * xs / 120)
        decay = math.exp(-a * t)
        self.a11 = decay * (c + a * s)
        self.a12 = decay * s
        self.a21 = -decay * lam * s
        self.a22 = decay * (c - a * s)
        self.n = lam.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        n = self.n
        v, p = X[:n], X[n:]
        if X.ndim == 1:
            return np.concatenate([self.a11 * v + self.a12 * p, self.a21 * v + self.a22 * p])
        return np.concatenate(
            [self.a11[:, None] * v + self.a12[:, None] * p, self.a21[:, None] * v + self.a22[:, None] * p]
        )

    def apply_velocity_kick(self, g: np.ndarray) -> np.ndarray:
        """E(t) [0; g] without forming the stacked vector."""
        if g.ndim == 1:
            return np.concatenate([self.a12 * g, self.a22 * g])
        return np.concatenate([self.a12[:, None] * g, self.a22[:, None] * g])

    def matrix(self) -> np.ndarray:
        return np.block([[np.diag(self.a11), np.diag(self.a12)], [np.diag(self.a21), np.diag(self.a22)]])


@dataclass(frozen=True, eq=False)
class PotentialField:
    """Time-dependent potential b(t, x) as Galerkin matrices on a time grid.

    Matrices are stored at ``times`` and interpolated linearly between them,
    so a coarser storage grid than the integration grid is allowed.  A single
    stored matrix means a time-independent potential.
    """

    basis: SpectralBasis
    times: np.ndarray
    matrices: np.ndarray = field(repr=False)
    bound: float = 0.0
    regularity: int = 1

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        mats = np.asarray(self.matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        if mats.shape[0] != times.size:
            raise ValueError("one matrix per stored time is required")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("potential times must be strictly increasing")
        mats = 0.5 * (mats + np.swapaxes(mats, 1, 2))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def zero(cls, basis: SpectralBasis) -> "PotentialField":
        n = basis.n_modes
        return cls(basis, np.zeros(1), np.zeros((1, n, n)), 0.0)

    @classmethod
    def constant(cls, basis: SpectralBasis, c: float) -> "PotentialField":
        return cls.from_node_values(basis, np.zeros(1), np.full((1, basis.quad_weights.size), float(c)))

    @classmethod
    def from_node_values(cls, basis: SpectralBasis, times, node_values, regularity: int = 1) -> "PotentialField":
        """Potential from samples of b(t_k, .) on the quadrature nodes (shape (K, Q))."""
        node_values = np.atleast_2d(np.asarray(node_values, dtype=float))
        if node_values.shape[1] != basis.quad_weights.size:
            raise ValueError("node values do not match the basis quadrature")
        W = basis.values
        mats = np.empty((node_values.shape[0], basis.n_modes, basis.n_modes))
        chunk = 256
        for i in range(0, node_values.shape[0], chunk):
            b = node_values[i : i + chunk] * basis.quad_weights
            mats[i : i + chunk] = np.einsum("iq,kq,jq->kij", W, b, W, optimize=True)
        coeffs = node_values @ (basis.values * basis.quad_weights).T
        h_r = np.sqrt(np.sum(basis.eigenvalues**regularity * coeffs**2, axis=1))
        bound = float(np.max(np.abs(node_values).max(axis=1) + h_r))
        return cls(basis, times, mats, bound, regularity)

    @classmethod
    def from_function(cls, basis: SpectralBasis, b: Callable, times) -> "PotentialField":
        """Sample ``b(t, x)`` with x the (Q, d) node array."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        values = np.stack([np.asarray(b(t, basis.quad_nodes), dtype=float).reshape(-1) for t in times])
        return cls.from_node_values(basis, times, values)

    @property
    def is_constant(self) -> bool:
        return self.times.size == 1

    @property
    def is_zero(self) -> bool:
        return not np.any(self.matrices)

    def matrix_at(self, t: float) -> np.ndarray:
        if self.is_constant:
            return self.matrices[0]
        times = self.times
        tol = 1e-9 * max(1.0, abs(times[-1]))
        if t < times[0] - tol or t > times[-1] + tol:
            raise ValueError(f"t={t} outside the potential's time range [{times[0]}, {times[-1]}]")
        i = min(max(int(np.searchsorted(times, t, side="right")) - 1, 0), times.size - 2)
        theta = (t - times[i]) / (times[i + 1] - times[i])
        theta = min(max(theta, 0.0), 1.0)
        if theta == 0.0:
            return self.matrices[i]
        if theta == 1.0:
            return self.matrices[i + 1]
        return (1.0 - theta) * self.matrices[i] + theta * self.matrices[i + 1]

    def reversed(self, T: float, t0: float = 0.0) -> "PotentialField":
        """Potential of the time-reversed problem: b'(tau) = b(t0 + T - tau)."""
        if self.is_constant:
            return self
        return PotentialField(self.basis, t0 + T - self.times[::-1], self.matrices[::-1], self.bound, self.regularity)

    def norm_bound(self) -> float:
        """Largest spectral norm over stored matrices (L2 operator bound of the truncation)."""
        return float(max(np.linalg.norm(M, 2) for M in self.matrices[:: max(1, self.matrices.shape[0] // 64)]))

    def average(self) -> np.ndarray:
        return self.matrices.mean(axis=0)


@dataclass(eq=False)
class SimulationTrace:
    """Solver output.  ``states`` rows are stacked [v; v_dot] at ``state_index`` nodes."""

    basis: SpectralBasis
    grid: TimeGrid
    states: np.ndarray
    state_index: np.ndarray
    energies: np.ndarray
    controls: np.ndarray | None = None
    forcing: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def state_times(self) -> np.ndarray:
        return self.grid.t0 + self.grid.dt * self.state_index

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def state(self, i: int) -> ModalState:
        """ModalState for the i-th stored node (negative indices allowed)."""
        return ModalState.from_vector(self.basis, self.states[i])

    def positions(self) -> np.ndarray:
        return self.states[:, : self.basis.n_modes]

    def velocities(self) -> np.ndarray:
        return self.states[:, self.basis.n_modes :]

    def to_csv(self, path, modes: bool = False) -> None:
        n = self.basis.n_modes
        lam = self.basis.eigenvalues
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["t", "E", "H0_norm"]
            if modes:
                head += [f"v{j + 1}" for j in range(n)] + [f"vdot{j + 1}" for j in range(n)]
            w.writerow(head)
            st = self.state_times
            for i, k in enumerate(self.state_index):
                X = self.states[i]
                h0 = math.sqrt(float(np.sum(X[:n] ** 2) + np.sum(X[n:] ** 2 / lam)))
                row = [f"{st[i]:.10g}", f"{self.energies[k]:.12g}", f"{h0:.12g}"]
                if modes:
                    row += [f"{x:.12g}" for x in X]
                w.writerow(row)
        with open(str(path) + ".json", "w") as fh:
            json.dump({"schema_version": 1, "dt": self.grid.dt, "n_steps": self.grid.n_steps, **_jsonable(self.meta)}, fh, indent=2)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        if isinstance(v, (str, int, float, bool, list, type(None))):
            out[k] = v
    return out


def stacked_energy(lam: np.ndarray, X: np.ndarray) -> np.ndarray:
    """E = sum(v_dot^2 + lambda v^2) for stacked (2n,) or (2n, B) arrays."""
    n = lam.size
    if X.ndim == 1:
        return float(np.dot(lam, X[:n] ** 2) + np.dot(X[n:], X[n:]))
    return lam @ (X[:n] ** 2) + np.sum(X[n:] ** 2, axis=0)


def energy(state: ModalState) -> float:
    return float(np.sum(state.vdot**2 + state.basis.eigenvalues * state.v**2))


def modified_energy(state: ModalState, alpha: float) -> float:
    return energy(state) + alpha * float(np.dot(state.v, state.vdot))


class Integrator:
    """Exponential trapezoidal stepper shared by the linear and nonlinear solvers.

    Per step, with E the exact free flow over dt and J = [0; I]:

        Y       = E (X_n + dt/2 J g_n)
        v_{n+1} = Y_v
        p_{n+1} = Y_p + dt/2 g_{n+1}

    where g is the velocity forcing.  ``position_force(k, t, v)`` returns the
    part of g that depends on the position only (e.g. -B v or -P f(u)).  A
    feedback term F(t) X is coupled either implicitly through the trapezoid
    (``coupling='implicit'``) or frozen at the step-start state over the
    whole step (``coupling='step-start'``).
    """

    def __init__(self, basis: SpectralBasis, gamma: float, dt: float):
        self.basis = basis
        self.gamma = float(gamma)
        self.dt = float(dt)
        self.flow = ModeFlow(basis.eigenvalues, gamma, dt)
        self.n = basis.n_modes

    def run(
        self,
        X0: np.ndarray,
        grid: TimeGrid,
        position_force: Callable | None = None,
        forcing: Callable | np.ndarray | None = None,
        feedback: Callable | None = None,
        coupling: str = "implicit",
        observer: Callable | None = None,
    ) -> np.ndarray:
        if abs(grid.dt - self.dt) > 1e-14 * max(1.0, self.dt):
            raise ValueError("grid step does not match the integrator step")
        if coupling not in ("implicit", "step-start"):
            raise ValueError(f"unknown coupling {coupling!r}")
        n, dt, flow = self.n, self.dt, self.flow
        X = np.array(X0, dtype=float)
        batch = X.ndim == 2
        ext = _forcing_source(forcing, grid, n)
        times = grid.times

        def base_force(k, x):
            g = np.zeros_like(x[:n])
            if ext is not None:
                e = ext(k)
                g = g + (e[:, None] if batch and e.ndim == 1 else e)
            if position_force is not None:
                g = g + position_force(k, times[k], x[:n])
            return g

        g = base_force(0, X)
        F = feedback(times[0]) if feedback is not None else None
        if F is not None:
            g = g + F @ X
        if observer is not None:
            observer(0, times[0], X, g)
        for k in range(grid.n_steps):
            if F is not None and coupling == "step-start":
                g_fb = F @ X
                Y = flow.apply(X) + 0.5 * dt * flow.apply_velocity_kick(g)
                v_new = Y[:n]
                X_new = np.concatenate([v_new, Y[n:]])
                g_next_rest = base_force(k + 1, X_new)
                X_new[n:] += 0.5 * dt * (g_next_rest + g_fb)
                F = feedback(times[k + 1])
                g = g_next_rest + F @ X_new
            else:
                Y = flow.apply(X) + 0.5 * dt * flow.apply_velocity_kick(g)
                X_new = Y
                g_next = base_force(k + 1, X_new)
                if feedback is not None:
                    F = feedback(times[k + 1])
                    Fv, Fp = F[:, :n], F[:, n:]
                    rhs = Y[n:] + 0.5 * dt * (g_next + Fv @ Y[:n])
                    if np.any(Fp):
                        X_new[n:] = np.linalg.solve(np.eye(n) - 0.5 * dt * Fp, rhs)
                    else:
                        X_new[n:] = rhs
                    g = g_next + F @ X_new
                else:
                    X_new[n:] += 0.5 * dt * g_next
                    g = g_next
            X = X_new
            if observer is not None:
                observer(k + 1, times[k + 1], X, g)
        return X


def _forcing_source(forcing, grid: TimeGrid, n: int):
    if forcing is None:
        return None
    if callable(forcing):
        return forcing
    arr = np.asarray(forcing, dtype=float)
    if arr.shape[0] != grid.n_steps + 1 or arr.shape[1] != n:
        raise ValueError(f"forcing has shape {arr.shape}, expected ({grid.n_steps + 1}, {n}, ...)")
    return lambda k: arr[k]


class Recorder:
    """Observer storing energies at every node and states every ``every`` nodes."""

    def __init__(self, basis: SpectralBasis, grid: TimeGrid, every: int = 1, controls: Callable | None = None):
        self.lam = basis.eigenvalues
        self.every = max(1, int(every))
        self.n_steps = grid.n_steps
        self.energies = []
        self.states = []
        self.index = []
        self.controls = controls
        self.control_rows = []

    def __call__(self, k, t, X, g):
        self.energies.append(stacked_energy(self.lam, X))
        if k % self.every == 0 or k == self.n_steps:
            self.states.append(np.array(X, copy=True))
            self.index.append(k)
            if self.controls is not None:
                self.control_rows.append(self.controls(k, t, X))

    def trace(self, basis, grid, meta=None, forcing=None) -> SimulationTrace:
        controls = np.array(self.control_rows) if self.controls is not None else None
        return SimulationTrace(
            basis, grid, np.array(self.states), np.array(self.index), np.array(self.energies), controls, forcing, meta or {}
        )


def free_propagate(state: ModalState, t: float, gamma: float) -> ModalState:
    flow = ModeFlow(state.basis.eigenvalues, gamma, t)
    return ModalState.from_vector(state.basis, flow.apply(state.vector))


def duhamel(g: np.ndarray, gamma: float, grid: TimeGrid, basis: SpectralBasis) -> SimulationTrace:
    """Integral of S(t - s)[0, g(s)] ds from zero data, g sampled as (n_steps + 1, n)."""
    g = np.asarray(g, dtype=float)
    if g.shape != (grid.n_steps + 1, basis.n_modes):
        raise ValueError(f"forcing has shape {g.shape}, expected {(grid.n_steps + 1, basis.n_modes)}")
    rec = Recorder(basis, grid)
    Integrator(basis, gamma, grid.dt).run(np.zeros(2 * basis.n_modes), grid, forcing=g, observer=rec)
    return rec.trace(basis, grid, {"scheme": "exponential-trapezoid", "operation": "duhamel"}, forcing=g)


def growth_rate(basis: SpectralBasis, gamma: float, potential: PotentialField | None) -> float:
    """Rate c with ||Phi(t)||_H <= e^{c t} ||Phi(0)||_H for the truncated linear flow."""
    c = max(0.0, -gamma) + 0.5 * abs(gamma)
    if potential is not None and not potential.is_zero:
        c += potential.norm_bound() / math.sqrt(basis.eigenvalues[0])
    return c


def solve_linear(
    b: PotentialField | None,
    eta: np.ndarray | Callable | None,
    init: ModalState | np.ndarray,
    gamma: float,
    grid: TimeGrid,
    basis: SpectralBasis | None = None,
    feedback: Callable | None = None,
    coupling: str = "implicit",
    record_every: int = 1,
) -> SimulationTrace:
    """Integrate v'' + gamma v' - Delta v + b v = eta (+ F(t) [v; v']) on the grid.

    ``eta`` is an array of modal forcings (n_steps + 1, n) or a callable of the
    node index.  ``init`` may be a ModalState or a stacked vector/batch.
    """
    if isinstance(init, ModalState):
        basis = init.basis
        X0 = init.vector
    else:
        X0 = np.asarray(init, dtype=float)
    if basis is None:
        raise ValueError("a basis is required when init is a bare array")
    if b is not None and b.basis is not basis:
        raise ValueError("potential and initial state live on different bases")
    pforce = None
    if b is not None and not b.is_zero:
        if not b.is_constant and (b.times[0] > grid.t0 + 1e-9 or b.times[-1] < grid.t_end - 1e-9 * max(1, grid.t_end)):
            raise ValueError("potential does not cover the time grid")
        pforce = lambda k, t, v: -(b.matrix_at(t) @ v)  # noqa: E731
    rec = Recorder(basis, grid, record_every)
    Integrator(basis, gamma, grid.dt).run(X0, grid, pforce, eta, feedback, coupling, rec)
    meta = {"scheme": "exponential-trapezoid", "dt": grid.dt, "gamma": gamma, "coupling": coupling}
    trace = rec.trace(basis, grid, meta, forcing=eta if isinstance(eta, np.ndarray) else None)
    if feedback is None:
        c = growth_rate(basis, gamma, b)
        E = trace.energies
        E0 = E[0] if np.ndim(E[0]) == 0 else np.max(E[0])
        E_max = E if E.ndim == 1 else E.max(axis=1)
        with np.errstate(divide="ignore"):
            excess = np.log(E_max + 1e-300) - np.log(E0 + 1e-300) - 2 * c * (grid.times - grid.t0)
        trace.meta["unstable"] = bool(eta is None and E0 > 0 and np.any(excess > 1e-8))
    return trace


def energy_balance_residual(
    trace: SimulationTrace, b: PotentialField | None, eta: np.ndarray | None, gamma: float
) -> float:
    """Max over interior nodes of |dE/dt + 2 gamma |v'|^2 + 2 (b v, v') - 2 (eta, v')|, scaled by max E.

    dE/dt is the central difference of the recorded energies; the trace must
    store every node.
    """
    if trace.states.shape[0] != trace.grid.n_steps + 1:
        raise ValueError("energy balance needs states at every node")
    n = trace.basis.n_modes
    X = trace.states
    v, p = X[:, :n], X[:, n:]
    times = trace.times
    dt = trace.grid.dt
    power = 2 * gamma * np.sum(p * p, axis=1)
    if b is not None and not b.is_zero:
        power += 2 * np.array([p[k] @ (b.matrix_at(times[k]) @ v[k]) for k in range(len(times))])
    if eta is not None:
        power -= 2 * np.sum(np.asarray(eta) * p, axis=1)
    residual = (trace.energies[2:] - trace.energies[:-2]) / (2 * dt) + power[1:-1]
    scale = max(float(np.max(trace.energies)), 1e-300)
    return float(np.max(np.abs(residual)) / scale)


def propagator_matrix(b: PotentialField | None, gamma: float, grid: TimeGrid, basis: SpectralBasis) -> np.ndarray:
    """The 2n x 2n matrix mapping X(t0) to X(t_end) under solve_linear."""
    eye = np.eye(2 * basis.n_modes)
    trace = solve_linear(b, None, eye, gamma, grid, basis=basis, record_every=grid.n_steps or 1)
    return trace.final


def potential_from_matrix(basis: SpectralBasis, M: np.ndarray) -> PotentialField:
    return PotentialField(basis, np.zeros(1), np.asarray(M)[None], float(np.linalg.norm(M, 2)))


__all__ = [
    "TimeGrid",
    "ModeFlow",
    "PotentialField",
    "SimulationTrace",
    "Integrator",
    "Recorder",
    "default_dt",
    "stacked_energy",
    "energy",
    "modified_energy",
    "free_propagate",
    "duhamel",
    "solve_linear",
    "energy_balance_residual",
    "propagator_matrix",
    "potential_from_matrix",
]
