"""Dirichlet-Laplacian eigenbases on separable domains.

Everything downstream works in eigen-coefficients: a function ``v`` on the
domain is the vector ``(v, e_j)`` for the first ``n_modes`` eigenfunctions,
and a wave state is the pair of position and velocity coefficient vectors.
Eigenpairs are exact sine products, so the only discretisation here is the
truncation itself and the quadrature used for multiplication operators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft

GL_POINTS = 16
QUAD_TOL = 1e-10


class DomainError(ValueError):
    """Invalid domain configuration."""


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    lengths: tuple[float, ...]
    x0: tuple[float, ...]
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(L) for L in np.atleast_1d(self.lengths)))
        object.__setattr__(self, "x0", tuple(float(c) for c in np.atleast_1d(self.x0)))
        self.validate()

    @property
    def dim(self) -> int:
        return len(self.lengths)

    def validate(self) -> None:
        expected = {"interval": 1, "rectangle": 2}
        if self.kind not in expected:
            raise DomainError(f"domain.kind: unknown kind {self.kind!r}")
        if len(self.lengths) != expected[self.kind]:
            raise DomainError(f"domain.lengths: {self.kind} needs {expected[self.kind]} lengths")
        if len(self.x0) != self.dim:
            raise DomainError("domain.x0: dimension does not match lengths")
        if any(not L > 0 for L in self.lengths):
            raise DomainError("domain.lengths: lengths must be positive")
        if not self.delta > 0:
            raise DomainError("domain.delta: delta must be positive")
        inside = all(0.0 <= c <= L for c, L in zip(self.x0, self.lengths))
        if inside:
            raise DomainError("domain.x0: x0 must lie strictly outside the closed domain")
        if not self.illuminated_sides():
            raise DomainError("domain.x0: no boundary portion is illuminated from x0")
        if 2 * self.delta > min(self.lengths):
            raise DomainError("domain.delta: collar wider than half the domain")

    def illuminated_sides(self) -> list[tuple[int, int]]:
        """Sides ``(axis, 0|1)`` where the outward normal points away from x0.

        On a box the sign of <y - x0, n_y> is constant along each side, so
        the illuminated boundary portion is a union of whole sides.
        """
        sides = []
        for d, (c, L) in enumerate(zip(self.x0, self.lengths)):
            if c > 0.0:
                sides.append((d, 0))
            if c < L:
                sides.append((d, 1))
        return sides

    def side_distance(self, x: np.ndarray, side: tuple[int, int]) -> np.ndarray:
        d, hi = side
        x = np.atleast_2d(x)
        return self.lengths[d] - x[:, d] if hi else x[:, d]

    def omega_indicator(self, x: np.ndarray) -> np.ndarray:
        """Indicator of the collar {x : dist(x, Gamma(x0)) < delta}."""
        x = np.atleast_2d(x)
        dist = np.min([self.side_distance(x, s) for s in self.illuminated_sides()], axis=0)
        return dist < self.delta

    @property
    def omega_descriptor(self) -> str:
        names = []
        for d, hi in self.illuminated_sides():
            axis = "xyz"[d]
            names.append(f"{axis}={'%g' % self.lengths[d] if hi else '0'}")
        return f"collar of width {self.delta:g} along " + ", ".join(names)

    @property
    def t_min(self) -> float:
        """Geometric threshold 2 sup_x |x - x0| (attained at a corner)."""
        corners = np.array(np.meshgrid(*[[0.0, L] for L in self.lengths])).reshape(self.dim, -1).T
        return 2.0 * float(np.max(np.linalg.norm(corners - np.array(self.x0), axis=1)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lengths": list(self.lengths), "x0": list(self.x0), "delta": self.delta}


def interval(L: float = math.pi, x0: float = -1.0, delta: float = 0.4) -> DomainSpec:
    return DomainSpec("interval", (L,), (x0,), delta)


def rectangle(L1: float, L2: float, x0: Sequence[float], delta: float) -> DomainSpec:
    return DomainSpec("rectangle", (L1, L2), tuple(x0), delta)


def _gauss_panels(L: float, panels: int) -> tuple[np.ndarray, np.ndarray]:
    g, w = np.polynomial.legendre.leggauss(GL_POINTS)
    h = L / panels
    left = np.arange(panels) * h
    x = (left[:, None] + 0.5 * h * (g[None, :] + 1.0)).ravel()
    return x, np.tile(0.5 * h * w, panels)


def _sine(j: np.ndarray, x: np.ndarray, L: float) -> np.ndarray:
    return math.sqrt(2.0 / L) * np.sin(np.outer(j, x) * (math.pi / L))


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    domain: DomainSpec
    n_modes: int
    eigenvalues: np.ndarray
    mode_indices: np.ndarray
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    values: np.ndarray = field(repr=False)

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def max_index(self) -> tuple[int, ...]:
        return tuple(int(m) for m in self.mode_indices.max(axis=0))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Eigenfunction values, shape (n_modes, len(x)), at arbitrary points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.domain.dim and x.shape[0] == self.domain.dim:
            x = x.T
        out = np.ones((self.n_modes, x.shape[0]))
        for d, L in enumerate(self.domain.lengths):
            out *= math.sqrt(2.0 / L) * np.sin(np.outer(self.mode_indices[:, d], x[:, d]) * (math.pi / L))
        return out

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Field values on the quadrature nodes from coefficients."""
        return np.asarray(coeffs).T @ self.values if np.ndim(coeffs) > 1 else self.values.T @ coeffs

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """L2 projection coefficients of a field sampled on the quadrature nodes."""
        return self.values @ (self.quad_weights * np.asarray(values))

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.quad_weights, values))

    def orthonormality_error(self) -> float:
        gram = (self.values * self.quad_weights) @ self.values.T
        return float(np.max(np.abs(gram - np.eye(self.n_modes))))


def build_basis(domain: DomainSpec, n_modes: int, panels: int | None = None) -> SpectralBasis:
    """Exact Dirichlet eigenpairs and a Gauss-Legendre panel quadrature.

    One 16-point panel per half-wave of the highest stored index (and at
    least 4 * n_modes nodes per axis) keeps products of up to five stored
    eigenfunctions exact to rounding, which covers the triple products in
    multiplication matrices and the quartic products in f'(u) = 3u^2.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    domain.validate()
    L = np.array(domain.lengths)
    if domain.dim == 1:
        idx = np.arange(1, n_modes + 1)[:, None]
    else:
        j, k = np.meshgrid(np.arange(1, n_modes + 1), np.arange(1, n_modes + 1), indexing="ij")
        idx = np.stack([j.ravel(), k.ravel()], axis=1)
    lam = np.sum((idx * math.pi / L) ** 2, axis=1)
    # round so that mathematically equal eigenvalues tie exactly before the index tie-break
    keys = [idx[:, d] for d in reversed(range(domain.dim))] + [np.round(lam, 9)]
    order = np.lexsort(keys)[:n_modes]
    idx, lam = idx[order], lam[order]

    nodes_1d, weights_1d = [], []
    for d in range(domain.dim):
        p = panels or max(int(idx[:, d].max()), -(-4 * n_modes // GL_POINTS))
        x, w = _gauss_panels(domain.lengths[d], p)
        nodes_1d.append(x)
        weights_1d.append(w)
    if domain.dim == 1:
        nodes = nodes_1d[0][:, None]
        weights = weights_1d[0]
        values = _sine(idx[:, 0], nodes_1d[0], domain.lengths[0])
    else:
        X, Y = np.meshgrid(*nodes_1d, indexing="ij")
        nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
        weights = np.outer(*weights_1d).ravel()
        vx = _sine(idx[:, 0], nodes_1d[0], domain.lengths[0])
        vy = _sine(idx[:, 1], nodes_1d[1], domain.lengths[1])
        values = (vx[:, :, None] * vy[:, None, :]).reshape(n_modes, -1)
    basis = SpectralBasis(domain, n_modes, lam, idx, nodes, weights, values)
    err = basis.orthonormality_error()
    if err > QUAD_TOL:
        raise RuntimeError(f"quadrature orthonormality error {err:.2e} exceeds {QUAD_TOL:g}")
    return basis


@dataclass(frozen=True, eq=False)
class ModalState:
    """Pair [v, v_dot] as eigencoefficient vectors."""

    basis: SpectralBasis
    v: np.ndarray
    vdot: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).copy()
        vd = np.asarray(self.vdot, dtype=float).copy()
        n = self.basis.n_modes
        if v.shape != (n,) or vd.shape != (n,):
            raise ValueError(f"coefficient vectors must have length {n}")
        v.setflags(write=False)
        vd.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "vdot", vd)

    @classmethod
    def zeros(cls, basis: SpectralBasis) -> "ModalState":
        return cls(basis, np.zeros(basis.n_modes), np.zeros(basis.n_modes))

    @classmethod
    def from_vector(cls, basis: SpectralBasis, x: np.ndarray) -> "ModalState":
        n = basis.n_modes
        x = np.asarray(x, dtype=float)
        return cls(basis, x[:n], x[n:])

    @classmethod
    def mode(cls, basis: SpectralBasis, j: int, velocity: bool = False, amplitude: float = 1.0):
        """State with a single unit coefficient on mode j (1-based)."""
        e = np.zeros(basis.n_modes)
        e[j - 1] = amplitude
        z = np.zeros(basis.n_modes)
        return cls(basis, z, e) if velocity else cls(basis, e, z)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.vdot])

    def __add__(self, other: "ModalState") -> "ModalState":
        return ModalState(self.basis, self.v + other.v, self.vdot + other.vdot)

    def __sub__(self, other: "ModalState") -> "ModalState":
        return ModalState(self.basis, self.v - other.v, self.vdot - other.vdot)

    def __mul__(self, c: float) -> "ModalState":
        return ModalState(self.basis, c * self.v, c * self.vdot)

    __rmul__ = __mul__


def fractional_norm(state: ModalState | np.ndarray, s: float, basis: SpectralBasis | None = None) -> float:
    """Truncated H_D^s norm (sum_j lambda_j^s v_j^2)^(1/2) of the position part.

    A bare coefficient vector may be passed together with its basis.
    """
    if isinstance(state, ModalState):
        basis, v = state.basis, state.v
    else:
        v = np.asarray(state, dtype=float)
    return float(np.sqrt(np.sum(basis.eigenvalues**s * v**2)))


def pair_norm(state: ModalState, s: float) -> float:
    """Norm of [v, v_dot] in H_D^s x H_D^(s-1); s = 1 gives sqrt(energy)."""
    lam = state.basis.eigenvalues
    return float(np.sqrt(np.sum(lam**s * state.v**2) + np.sum(lam ** (s - 1) * state.vdot**2)))


def pair_weights(basis: SpectralBasis, s: float) -> np.ndarray:
    """Diagonal of the Gram matrix of the H^s x H^(s-1) pair norm in coefficient space."""
    lam = basis.eigenvalues
    return np.concatenate([lam**s, lam ** (s - 1)])


def project(state: ModalState, N: int) -> ModalState:
    """Orthogonal projection P_N onto span{e_1, ..., e_N}, applied to both components."""
    if not 0 <= N <= state.basis.n_modes:
        raise ValueError(f"N={N} outside [0, {state.basis.n_modes}]")
    mask = np.arange(state.basis.n_modes) < N
    return ModalState(state.basis, state.v * mask, state.vdot * mask)


def spectral_multiplier(psi: Callable, h: float, state: ModalState) -> ModalState:
    """Apply psi(-h^2 Delta): coefficient j is scaled by psi(h^2 lambda_j)."""
    scale = np.broadcast_to(np.asarray(psi(h**2 * state.basis.eigenvalues), dtype=float), (state.basis.n_modes,))
    return ModalState(state.basis, scale * state.v, scale * state.vdot)


def _field_values(a, basis: SpectralBasis) -> np.ndarray:
    if isinstance(a, CutoffField):
        if a.basis is not basis:
            raise ValueError("cutoff field was built on a different basis")
        return a.values
    if callable(a):
        return np.asarray(a(basis.quad_nodes), dtype=float).reshape(-1)
    values = np.asarray(a, dtype=float)
    if values.ndim == 0:
        return np.full(basis.quad_weights.shape, float(values))
    if values.shape != basis.quad_weights.shape:
        raise ValueError(
            f"field sampled on {values.shape} nodes, basis quadrature has {basis.quad_weights.shape}"
        )
    return values


def mult_operator_matrix(a, basis: SpectralBasis) -> np.ndarray:
    """Galerkin matrix M_ij = integral of a e_i e_j.

    ``a`` is a field sampled on the quadrature nodes, a scalar, a callable of
    the node array, or a :class:`CutoffField`.
    """
    values = _field_values(a, basis)
    if values.size and np.all(values == values.flat[0]):
        # constant field: exactly c I on the orthonormal basis, free of quadrature rounding
        return float(values.flat[0]) * np.eye(basis.n_modes)
    M = (basis.values * (basis.quad_weights * values)) @ basis.values.T
    return 0.5 * (M + M.T)


def smoothstep5(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


@dataclass(frozen=True, eq=False)
class CutoffField:
    basis: SpectralBasis
    values: np.ndarray = field(repr=False)
    width: float = 0.0
    inner: str = ""
    evaluator: Callable | None = field(default=None, repr=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.evaluator is None:
            raise ValueError("this cutoff has no point evaluator")
        return self.evaluator(np.atleast_2d(x))

    @classmethod
    def constant(cls, basis: SpectralBasis, c: float = 1.0) -> "CutoffField":
        fn = lambda x: np.full(np.atleast_2d(x).shape[0], float(c))  # noqa: E731
        return cls(basis, fn(basis.quad_nodes), 0.0, "whole domain" if c else "empty", fn)

    def matrix(self) -> np.ndarray:
        return mult_operator_matrix(self, self.basis)

    def to_dict(self) -> dict:
        return {"width": self.width, "inner": self.inner}


def collar_cutoff(basis: SpectralBasis, width: float | None = None) -> CutoffField:
    """Smooth chi with chi = 1 on Omega_{delta/2}(x0) and support inside the collar.

    Each illuminated side contributes a 1-D profile of the perpendicular
    distance (1 up to delta/2, quintic smoothstep to 0 over ``width``);
    sides are combined as 1 - prod(1 - s_i), which is smooth on boxes.
    """
    dom = basis.domain
    width = dom.delta / 4 if width is None else width
    if not 0 < width <= dom.delta / 2:
        raise ValueError("transition width must lie in (0, delta/2]")
    half = dom.delta / 2

    def evaluate(x):
        x = np.atleast_2d(x)
        keep = np.ones(x.shape[0])
        for side in dom.illuminated_sides():
            d = dom.side_distance(x, side)
            keep *= smoothstep5((d - half) / width)
        return 1.0 - keep

    return CutoffField(basis, evaluate(basis.quad_nodes), width, f"dist(x, Gamma(x0)) <= {half:g}", evaluate)


def bump(lo: float, hi: float) -> Callable[[np.ndarray], np.ndarray]:
    """C-infinity bump supported in [lo, hi], peak value 1 at the midpoint."""
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)

    def psi(x):
        y = (np.asarray(x, dtype=float) - c) / r
        out = np.zeros_like(y)
        inside = np.abs(y) < 1
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - y[inside] ** 2))
        return out

    psi.support = (lo, hi)
    return psi


@dataclass
class CommutatorScan:
    hs: np.ndarray
    norms: np.ndarray
    resolvable: np.ndarray
    slope: float | None
    norm_spec: tuple[float, float]

    @property
    def slope_defined(self) -> bool:
        return self.slope is not None


def commutator_norm_scan(
    a,
    psi: Callable,
    h_list: Sequence[float],
    norm_spec: tuple[float, float],
    basis: SpectralBasis,
    support_max: float | None = None,
    length_scale: float | None = None,
    zero_tol: float = 1e-13,
) -> CommutatorScan:
    """Operator norms of [psi(-h^2 Delta), a] between fractional spaces.

    ``norm_spec = (source, target)`` measures the commutator from H^source to
    H^target, i.e. the top singular value of
    Lam^(target/2) [Psi_h, M_a] Lam^(-source/2).  The log-log slope is fitted
    over the resolvable h: h^2 lambda_max >= sup supp psi, so the multiplier
    band lies inside the stored spectrum, and h <= length_scale / (2 pi), so
    the band wavelength is below the scale on which ``a`` varies (the h-power
    laws are asymptotic).  For a :class:`CutoffField` the length scale
    defaults to its transition width.  The slope is ``None`` when the
    commutator vanishes identically or fewer than three h are resolvable.
    """
    hs = np.asarray(h_list, dtype=float)
    if hs.size < 3:
        raise ValueError("at least three h values are needed for a slope")
    if np.any(hs <= 0) or np.any(hs > 1) or np.any(np.diff(hs) >= 0):
        raise ValueError("h_list must be strictly decreasing within (0, 1]")
    if support_max is None:
        support_max = getattr(psi, "support", (None, 0.0))[1]
    M = mult_operator_matrix(a, basis)
    src, tgt = norm_spec
    lam = basis.eigenvalues
    left, right = lam ** (tgt / 2), lam ** (-src / 2)
    norms = np.empty_like(hs)
    for i, h in enumerate(hs):
        p = np.asarray(psi(h**2 * lam), dtype=float)
        C = p[:, None] * M - M * p[None, :]
        norms[i] = np.linalg.norm(left[:, None] * C * right[None, :], 2)
    if length_scale is None:
        length_scale = a.width if isinstance(a, CutoffField) and a.width > 0 else 2 * math.pi
    resolvable = (hs**2 * basis.lambda_max >= support_max) & (hs <= length_scale / (2 * math.pi))
    scale = max(1.0, float(np.max(np.abs(M))))
    slope = None
    use = resolvable & (norms > zero_tol * scale)
    if np.count_nonzero(use) >= 3:
        slope = float(np.polyfit(np.log(hs[use]), np.log(norms[use]), 1)[0])
    return CommutatorScan(hs, norms, resolvable, slope, (src, tgt))


class Collocation:
    """Pseudo-spectral transform between coefficients and a uniform sine grid.

    With ``M_d = floor((rho + 1) J_d / 2) + 1`` interior nodes per axis the
    discrete sine transform projects degree-``rho`` polynomials of the field
    back onto the stored modes without aliasing.
    """

    def __init__(self, basis: SpectralBasis, degree: int = 3):
        self.basis = basis
        self.degree = degree
        dom = basis.domain
        self.shape = tuple((degree + 1) * J // 2 + 1 for J in basis.max_index)
        self.scale = float(np.prod([math.sqrt((M + 1) / L) for M, L in zip(self.shape, dom.lengths)]))
        self._index = tuple(basis.mode_indices[:, d] - 1 for d in range(dom.dim))
        axes = [np.arange(1, M + 1) * L / (M + 1) for M, L in zip(self.shape, dom.lengths)]
        grids = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.stack([g.ravel() for g in grids], axis=1)
        self.cell = float(np.prod([L / (M + 1) for M, L in zip(self.shape, dom.lengths)]))

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(len(self.shape)))

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Field values on the grid; trailing batch axes of ``coeffs`` are kept."""
        coeffs = np.asarray(coeffs, dtype=float)
        full = np.zeros(self.shape + coeffs.shape[1:])
        full[self._index] = coeffs
        return self.scale * scipy.fft.dstn(full, type=1, axes=self.axes, norm="ortho")

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        """Galerkin coefficients (f, e_j) of grid values (trapezoid rule, exact for trig polynomials)."""
        out = scipy.fft.dstn(values, type=1, axes=self.axes, norm="ortho")
        return out[self._index] / self.scale

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return self.cell * np.sum(values, axis=self.axes)


def basis_description(basis: SpectralBasis, cutoff: CutoffField | None = None) -> dict:
    out = {"domain": basis.domain.to_dict(), "n_modes": basis.n_modes}
    if cutoff is not None:
        out["cutoff"] = cutoff.to_dict()
    return out


def basis_from_description(desc: dict) -> tuple[SpectralBasis, CutoffField | None]:
    d = desc["domain"]
    basis = build_basis(DomainSpec(d["kind"], tuple(d["lengths"]), tuple(d["x0"]), d["delta"]), desc["n_modes"])
    cutoff = None
    if "cutoff" in desc:
        cutoff = collar_cutoff(basis, desc["cutoff"]["width"])
    return basis, cutoff
