"""Scenario configuration: TOML input, validation with field paths, env overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

ENV_PREFIX = "WAVESTAB__"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key (e.g. domain.x0)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DomainConfig:
    kind: str = "interval"
    lengths: list = field(default_factory=lambda: [math.pi])
    x0: list = field(default_factory=lambda: [-1.0])
    delta: float = 0.4


@dataclass
class DiscretisationConfig:
    n_modes: int = 32
    dt: float = 0.0  # 0 selects the stability rule
    intervals: int = 4  # horizon in units of the window T
    burn_in: float = 50.0
    tail: float = 200.0  # extra reference horizon available to the Riccati sweep
    potential_stride: int = 16


@dataclass
class NonlinearityConfig:
    preset: str = "cubic"
    coefficients: list = field(default_factory=list)  # overrides preset when non-empty
    check_range: float = 10.0


@dataclass
class ForcingConfig:
    amplitude: float = 10.0
    omega: float = 1.5
    modulation: float = 0.0


@dataclass
class ControlConfig:
    sigma: float = 0.5
    N: int = 0  # 0: smallest N with lambda_{N+1}^{-sigma/2} <= 1/4
    m: int = 0  # 0: select_m
    m_factor: float = 2.0
    delta_pen: float = 1e-4
    beta: float = 0.0  # 0: log 2 / T
    T_factor: float = 2.5
    cutoff_width: float = 0.0  # 0: delta / 4
    solver: str = "direct"
    riccati_tol: float = 1e-5
    terminal: str = "are"
    max_tail: float = 200.0
    coupling: str = "implicit"


@dataclass
class EnsembleConfig:
    count: int = 20
    epsilon: float = -1.0  # negative: search, otherwise a fixed perturbation size
    eps0: float = 0.1
    eps_max: float = 10.0
    bisections: int = 4
    success_factor: float = 0.8


@dataclass
class CommutatorConfig:
    n_modes: int = 512
    cutoff: str = "collar"  # or "constant"
    psi_support: list = field(default_factory=lambda: [0.5, 4.0])
    points: int = 8
    source: float = 1.0  # H^1 -> L^2, where the commutator scales like h^2
    target: float = 0.0


@dataclass
class ScenarioConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    discretisation: DiscretisationConfig = field(default_factory=DiscretisationConfig)
    nonlinearity: NonlinearityConfig = field(default_factory=NonlinearityConfig)
    gamma: float = 0.1
    forcing: ForcingConfig = field(default_factory=ForcingConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    commutator: CommutatorConfig = field(default_factory=CommutatorConfig)
    seed: int = 0
    output: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        cfg = _build(cls, data, "")
        validate(cfg)
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(path, f"expected a list of numbers, got {value!r}") from None
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a table")
    obj = cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(path, "unknown key")
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default):
            setattr(obj, key, _build(type(default), value, path + "."))
        else:
            setattr(obj, key, _coerce(value, default, path))
    return obj


def validate(cfg: ScenarioConfig) -> None:
    d = cfg.domain
    if d.kind not in ("interval", "rectangle"):
        raise ConfigError("domain.kind", f"unknown kind {d.kind!r}")
    dim = 1 if d.kind == "interval" else 2
    if len(d.lengths) != dim:
        raise ConfigError("domain.lengths", f"expected {dim} value(s)")
    if len(d.x0) != dim:
        raise ConfigError("domain.x0", f"expected {dim} value(s)")
    if any(L <= 0 for L in d.lengths):
        raise ConfigError("domain.lengths", "lengths must be positive")
    if all(0 <= x <= L for x, L in zip(d.x0, d.lengths)):
        raise ConfigError("domain.x0", "the observation point must lie outside the closed domain")
    if not d.delta > 0:
        raise ConfigError("domain.delta", "must be positive")
    z = cfg.discretisation
    if z.n_modes < 1:
        raise ConfigError("discretisation.n_modes", "must be >= 1")
    if z.dt < 0:
        raise ConfigError("discretisation.dt", "must be positive (or 0 for the default rule)")
    if z.intervals < 1:
        raise ConfigError("discretisation.intervals", "horizon must cover at least one window")
    if z.burn_in < 0 or z.tail < 0:
        raise ConfigError("discretisation.tail" if z.tail < 0 else "discretisation.burn_in", "must be >= 0")
    if z.potential_stride < 1:
        raise ConfigError("discretisation.potential_stride", "must be >= 1")
    c = cfg.control
    if c.N > z.n_modes:
        raise ConfigError("control.N", "exceeds discretisation.n_modes")
    if c.m > z.n_modes:
        raise ConfigError("control.m", "exceeds discretisation.n_modes")
    if c.N < 0 or c.m < 0:
        raise ConfigError("control.N" if c.N < 0 else "control.m", "must be >= 0")
    if c.T_factor < 1:
        raise ConfigError("control.T_factor", "window must be at least the geometric threshold")
    if not c.delta_pen > 0:
        raise ConfigError("control.delta_pen", "must be positive")
    if c.sigma < 0:
        raise ConfigError("control.sigma", "must be >= 0")
    if c.solver not in ("direct", "cg"):
        raise ConfigError("control.solver", f"unknown solver {c.solver!r}")
    if c.terminal not in ("zero", "are"):
        raise ConfigError("control.terminal", f"unknown terminal {c.terminal!r}")
    if c.coupling not in ("implicit", "step-start"):
        raise ConfigError("control.coupling", f"unknown coupling {c.coupling!r}")
    if cfg.gamma < 0:
        raise ConfigError("gamma", "must be >= 0")
    e = cfg.ensemble
    if e.count < 1:
        raise ConfigError("ensemble.count", "must be >= 1")
    if cfg.commutator.cutoff not in ("collar", "constant"):
        raise ConfigError("commutator.cutoff", f"unknown cutoff {cfg.commutator.cutoff!r}")
    if cfg.commutator.points < 3:
        raise ConfigError("commutator.points", "need at least 3 h values")
    from .nlw import PRESETS

    nl = cfg.nonlinearity
    if not nl.coefficients and nl.preset not in PRESETS:
        raise ConfigError("nonlinearity.preset", f"unknown preset {nl.preset!r}")
    if nl.coefficients and nl.coefficients[0] != 0:
        raise ConfigError("nonlinearity.coefficients", "f(0) must vanish (constant term 0)")
    if cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_env(data: dict, environ=None) -> dict:
    """Overlay WAVESTAB__section__key=value variables (values parsed as TOML)."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(data))
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k for k in name[len(ENV_PREFIX) :].split("__") if k]
        if not keys:
            continue
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(keys), "override path crosses a scalar")
        node[keys[-1]] = _parse_scalar(text)
    return out


PRESET_CONFIGS = {
    "default-cubic": {},
    "smoke": {
        "discretisation": {"n_modes": 8, "intervals": 2, "burn_in": 10.0, "tail": 20.0, "potential_stride": 4},
        "control": {"max_tail": 20.0},
        "ensemble": {"count": 4, "eps_max": 0.4, "bisections": 1},
        "commutator": {"n_modes": 128},
    },
}


def load_config(path: str | None = None, preset: str | None = None, environ=None, seed: int | None = None):
    data: dict = {}
    if preset is not None:
        if preset not in PRESET_CONFIGS:
            raise ConfigError("preset", f"unknown preset {preset!r}; known: {sorted(PRESET_CONFIGS)}")
        data = json.loads(json.dumps(PRESET_CONFIGS[preset]))
    if path is not None:
        try:
            with open(path, "rb") as fh:
                file_data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"TOML syntax error: {exc}") from None
        data = _merge(data, file_data)
    data = apply_env(data, environ)
    if seed is not None:
        data["seed"] = seed
    return ScenarioConfig.from_dict(data)


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out
