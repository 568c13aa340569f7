"""Command-line entry point and end-to-end pipeline.

Stages run in dependency order (basis, reference, linearise,
observability, select_m, synthesize, riccati, closed_loop); a failing stage
stops the rest, and a JSON report is written either way.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import control, nlw, observability, spectral, waveop
from .config import ConfigError, PRESET_CONFIGS, ScenarioConfig, load_config

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_CONVERGENCE = 0, 2, 3, 4
STAGES = ("basis", "reference", "linearise", "observability", "select_m", "synthesize", "riccati", "closed_loop")

log = logging.getLogger("wavestab")


class StageFailure(RuntimeError):
    pass


class NotConverged(RuntimeError):
    pass


def jsonable(obj):
    """Recursively convert numpy values and non-finite floats to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


@dataclass
class Scenario:
    """Objects shared between stages, built on demand from a configuration."""

    cfg: ScenarioConfig
    cache: dict = field(default_factory=dict)

    def rng(self, stage: str) -> np.random.Generator:
        key = STAGES.index(stage) if stage in STAGES else len(STAGES)
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, key]))

    @property
    def domain(self) -> spectral.DomainSpec:
        d = self.cfg.domain
        return spectral.DomainSpec(d.kind, tuple(d.lengths), tuple(d.x0), d.delta)

    @property
    def basis(self) -> spectral.SpectralBasis:
        if "basis" not in self.cache:
            self.cache["basis"] = spectral.build_basis(self.domain, self.cfg.discretisation.n_modes)
        return self.cache["basis"]

    @property
    def chi(self) -> spectral.CutoffField:
        if "chi" not in self.cache:
            w = self.cfg.control.cutoff_width or None
            self.cache["chi"] = spectral.collar_cutoff(self.basis, w)
        return self.cache["chi"]

    @property
    def T(self) -> float:
        return self.cfg.control.T_factor * self.domain.t_min

    @property
    def dt(self) -> float:
        return self.cfg.discretisation.dt or waveop.default_dt(self.basis)

    @property
    def window(self) -> waveop.TimeGrid:
        return self.horizon_grid.sub(0, self.window_steps)

    @property
    def window_steps(self) -> int:
        return int(round(self.T / self.horizon_grid.dt))

    @property
    def horizon_grid(self) -> waveop.TimeGrid:
        if "hgrid" not in self.cache:
            g = waveop.TimeGrid.covering(self.T, self.dt)
            self.cache["hgrid"] = waveop.TimeGrid(0.0, g.dt, g.n_steps * self.cfg.discretisation.intervals)
        return self.cache["hgrid"]

    @property
    def beta(self) -> float:
        return self.cfg.control.beta or control.design_beta(self.T)

    @property
    def N(self) -> int:
        return self.cfg.control.N or control.default_N(self.basis, self.cfg.control.sigma)

    @property
    def f(self) -> nlw.Nonlinearity:
        nl = self.cfg.nonlinearity
        return nlw.nonlinearity_from_spec(nl.coefficients if nl.coefficients else nl.preset)

    def forcing_profile(self, x: np.ndarray) -> np.ndarray:
        out = np.ones(x.shape[0])
        for d, L in enumerate(self.domain.lengths):
            out = out * np.sin(math.pi * x[:, d] / L)
        return out

    def forcing(self, t0: float, t1: float) -> nlw.ForcingField:
        fc = self.cfg.forcing
        if fc.amplitude == 0:
            return nlw.ForcingField.zero(self.basis)
        step = min(0.01, self.dt * 4)
        times = np.arange(t0, t1 + step, step)

        def h(t, x):
            return fc.amplitude * self.forcing_profile(x) * math.cos(fc.omega * t) * (1 + fc.modulation * math.sin(t))

        return nlw.ForcingField.from_function(self.basis, h, times)


# ---------------------------------------------------------------- stages


def stage_basis(sc: Scenario) -> dict:
    basis = sc.basis
    err = basis.orthonormality_error()
    if err > 1e-10:
        raise StageFailure(f"basis orthonormality error {err:.2e}")
    return {
        "n_modes": basis.n_modes,
        "lambda_max": basis.lambda_max,
        "orthonormality_error": err,
        "T_min": sc.domain.t_min,
        "T": sc.T,
        "dt": sc.horizon_grid.dt,
        "dt_sqrt_lambda_max": sc.horizon_grid.dt * math.sqrt(basis.lambda_max),
        "N": sc.N,
        "tail_factor": control.tail_factor(basis, sc.N, sc.cfg.control.sigma),
        "beta_design": sc.beta,
        "control_region": sc.domain.omega_descriptor,
        "cutoff": sc.chi.to_dict(),
    }


def stage_reference(sc: Scenario) -> dict:
    cfg = sc.cfg
    f = sc.f
    cert = nlw.validate_nonlinearity(f, cfg.nonlinearity.check_range)
    burn = cfg.discretisation.burn_in
    basis = sc.basis
    init = spectral.ModalState.zeros(basis)
    dt = sc.horizon_grid.dt
    if burn > 0:
        bgrid = waveop.TimeGrid.covering(burn, dt, t0=-burn)
        # burn-in uses its own step; the reference itself runs on the horizon step
        bgrid = waveop.TimeGrid(-bgrid.n_steps * dt, dt, bgrid.n_steps)
        btr = nlw.solve_nlw(f, cfg.gamma, sc.forcing(bgrid.t0, 0.0), None, init, bgrid, record_every=bgrid.n_steps)
        if btr.meta["blowup"]:
            raise StageFailure("reference burn-in blew up")
        init = btr.state(-1)
    hg = sc.horizon_grid
    span = hg.T + cfg.discretisation.tail
    grid = waveop.TimeGrid(0.0, dt, int(math.ceil(span / dt - 1e-9)))
    ref = nlw.reference_trajectory(f, cfg.gamma, sc.forcing(0.0, grid.t_end), init, grid, record_every=1)
    if ref.blowup:
        raise StageFailure("reference trajectory blew up")
    sc.cache["reference"] = ref
    col = nlw.collocation_for(f, basis)
    sc.cache["collocation"] = col
    sc.cache["ref_path"] = nlw.ReferencePath.from_trace(ref.trace, hg, col)
    return {"nonlinearity": f.to_dict(), "certificate": {"passed": cert.passed, "c": cert.c, **cert.constants},
            **ref.report(), "burn_in": burn}


def stage_linearise(sc: Scenario) -> dict:
    ref = sc.cache["reference"]
    b = nlw.linearize(sc.f, ref.trace, stride=sc.cfg.discretisation.potential_stride)
    sc.cache["b"] = b
    return {"bound": b.bound, "stored_matrices": int(b.times.size), "t_range": [float(b.times[0]), float(b.times[-1])]}


def stage_observability(sc: Scenario) -> dict:
    c = sc.cfg
    b = sc.cache.get("b")
    grid = sc.window
    out = {}
    for name, pot in (("free", None), ("linearised", b)):
        if name == "linearised" and pot is None:
            continue
        rep = observability.gramian(pot, sc.chi, grid.T, c.control.sigma, c.gamma, grid, sc.basis)
        sc.cache[f"gramian_{name}"] = rep
        out[name] = rep.summary()
        if not rep.certified:
            raise StageFailure(f"observability Gramian ({name}) not positive definite")
    key = "linearised" if "linearised" in out else "free"
    out["M6_full"] = out[key]["M6"]
    return out


def stage_select_m(sc: Scenario) -> dict:
    c = sc.cfg
    if c.control.m:
        sc.cache["m"] = c.control.m
        return {"m": c.control.m, "override": True}
    rep = sc.cache.get("gramian_linearised") or sc.cache.get("gramian_free")
    grid = sc.window
    try:
        res = observability.select_m(sc.cache.get("b"), sc.chi, grid.T, c.control.sigma, c.gamma, sc.N, grid,
                                     c.control.m_factor, sc.basis, rep)
    except observability.ObservabilityError as exc:
        raise NotConverged(str(exc)) from exc
    sc.cache["m"] = res.m
    return res.summary()


def stage_synthesize(sc: Scenario) -> dict:
    c = sc.cfg
    basis = sc.basis
    X0 = nlw.random_perturbations(basis, 1.0, 1, sc.rng("synthesize"))[:, 0]
    init = spectral.ModalState.from_vector(basis, X0)
    cc = control.concatenate_control(sc.cache.get("b"), sc.chi, init, sc.window.T, c.discretisation.intervals,
                                     sc.cache["m"], sc.N, c.control.delta_pen, c.control.sigma, c.gamma,
                                     sc.horizon_grid.dt, c.control.solver)
    out = cc.summary()
    out["residuals"] = [ic.residuals for ic in cc.intervals]
    out["converged"] = all(ic.converged for ic in cc.intervals)
    sc.cache["concatenated"] = cc
    if not out["converged"]:
        raise NotConverged("interval optimality residuals above tolerance")
    if cc.contractions.max() > 0.5:
        raise StageFailure(f"interval contraction {cc.contractions.max():.3f} exceeds 1/2")
    return out


def stage_riccati(sc: Scenario) -> dict:
    c = sc.cfg
    terminal = None if c.control.terminal == "zero" else c.control.terminal
    law = control.riccati_value(sc.cache.get("b"), sc.chi, sc.beta, sc.cache["m"], c.gamma, sc.horizon_grid,
                                terminal, c.control.riccati_tol, max_tail=c.control.max_tail)
    sc.cache["law"] = law
    # linear decay on a seeded ensemble
    basis = sc.basis
    X = nlw.random_perturbations(basis, 1.0, c.ensemble.count, sc.rng("riccati"))
    sim = control.simulate_feedback(law, sc.cache.get("b"), X, c.gamma, sc.horizon_grid, basis, c.control.coupling,
                                    record_every=sc.horizon_grid.n_steps)
    T = sc.window.T
    fits = [control.fit_decay(sim.trace.times, sim.trace.energies[:, j], 2 * T if c.discretisation.intervals > 2 else 0)
            for j in range(X.shape[1])]
    betas = [b for _, b in fits]
    out = {**law.certificates(), "linear_beta_fit_min": min(betas), "linear_beta_fit_max": max(betas),
           "beta_design": law.beta}
    if not min(betas) >= c.ensemble.success_factor * law.beta:
        raise StageFailure("linear closed-loop decay below the design rate")
    return out


def stage_closed_loop(sc: Scenario) -> dict:
    c = sc.cfg
    ref = sc.cache["ref_path"]
    law = sc.cache["law"]
    f = sc.f
    col = sc.cache["collocation"]
    T = sc.window.T
    fit_from = 2 * T if c.discretisation.intervals > 2 else 0.5 * sc.horizon_grid.T
    rng = sc.rng("closed_loop")
    if c.ensemble.epsilon >= 0:
        eps = c.ensemble.epsilon
        D = nlw.random_perturbations(sc.basis, 1.0, c.ensemble.count, rng)
        res = nlw.closed_loop(f, c.gamma, ref, law, eps * D, fit_from, c.control.coupling, col=col,
                              success_factor=c.ensemble.success_factor)
        base = nlw.closed_loop(f, c.gamma, ref, None, eps * D, fit_from, c.control.coupling, col=col)
        history = [{"epsilon": eps, "success": res.success, "beta_fit": res.beta_fit}]
        P = eps * D
    else:
        search = nlw.find_epsilon(f, c.gamma, ref, law, rng, c.ensemble.count, c.ensemble.eps0, c.ensemble.eps_max,
                                  c.ensemble.bisections, fit_from, c.control.coupling)
        if search.result is None:
            raise StageFailure("no perturbation size gave closed-loop decay")
        res, base, history, eps, P = search.result, search.baseline, search.history, search.epsilon, search.perturbations
    sc.cache["closed_loop"] = (res, base, P)
    closed_final = res.energies[-1]
    open_final = base.energies[-1] if not base.blowup else np.full_like(closed_final, np.inf)
    dominated = bool(np.all(open_final > closed_final)) if eps > 0 else True
    out = {**res.summary(), "epsilon": eps, "search": history, "baseline": base.summary(),
           "baseline_dominates": dominated, "fit_window": list(res.fit_window)}
    if not res.success:
        raise StageFailure("closed loop failed at the reported epsilon")
    return out


STAGE_FUNCS = {
    "basis": stage_basis,
    "reference": stage_reference,
    "linearise": stage_linearise,
    "observability": stage_observability,
    "select_m": stage_select_m,
    "synthesize": stage_synthesize,
    "riccati": stage_riccati,
    "closed_loop": stage_closed_loop,
}

COMMAND_STAGES = {
    "simulate": ("basis", "reference"),
    "observability": ("basis", "reference", "linearise", "observability"),
    "synthesize": ("basis", "reference", "linearise", "observability", "select_m", "synthesize"),
    "feedback": ("basis", "reference", "linearise", "observability", "select_m", "riccati"),
    "closed-loop": ("basis", "reference", "linearise", "observability", "select_m", "riccati", "closed_loop"),
    "run": STAGES,
}


@dataclass
class RunReport:
    command: str
    config: ScenarioConfig
    stages: list = field(default_factory=list)
    status: str = "ok"
    failed_stage: str | None = None
    message: str = ""

    @property
    def exit_code(self) -> int:
        return {"ok": EXIT_OK, "failed": EXIT_STAGE, "not-converged": EXIT_CONVERGENCE}[self.status]

    def to_dict(self) -> dict:
        return jsonable({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "message": self.message,
            "seed": self.config.seed,
            "config_hash": self.config.hash(),
            "config": self.config.to_dict(),
            "stages": self.stages,
        })


def run_pipeline(cfg: ScenarioConfig, stages=STAGES, command: str = "run", scenario: Scenario | None = None) -> RunReport:
    sc = scenario or Scenario(cfg)
    report = RunReport(command, cfg)
    for name in stages:
        t0 = time.perf_counter()
        entry = {"name": name}
        try:
            entry["report"] = STAGE_FUNCS[name](sc)
            entry["status"] = "ok"
        except NotConverged as exc:
            entry.update(status="not-converged", error=str(exc))
        except (StageFailure, control.ControlError, observability.ObservabilityError, nlw.NonlinearityError,
                spectral.DomainError, ValueError, np.linalg.LinAlgError) as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        entry["seconds"] = round(time.perf_counter() - t0, 3)
        report.stages.append(entry)
        log.info("stage %-13s %s (%.1fs)", name, entry["status"], entry["seconds"])
        if entry["status"] != "ok":
            report.status, report.failed_stage, report.message = entry["status"], name, entry.get("error", "")
            break
    report.scenario = sc
    return report


def strip_timings(report: dict) -> dict:
    out = json.loads(json.dumps(report))
    for st in out.get("stages", []):
        st.pop("seconds", None)
    return out


# ---------------------------------------------------------------- outputs


def write_outputs(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(jsonable(report.config.to_dict()), indent=2, sort_keys=True) + "\n")
    sc: Scenario = getattr(report, "scenario", None)
    if sc is None:
        return
    ref = sc.cache.get("reference")
    if ref is not None and report.command == "simulate":
        ref.trace.to_csv(out / "reference.csv")
    cc = sc.cache.get("concatenated")
    if cc is not None:
        table = cc.node_table()
        m = table.shape[1] - 3
        with open(out / "synthesize.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"c{j + 1}" for j in range(m)], "eta_norm", "E_v"])
            for row in table:
                w.writerow([f"{v:.12g}" for v in row])
    law = sc.cache.get("law")
    if law is not None:
        (out / "law.json").write_text(json.dumps(jsonable(law.to_dict())) + "\n")
    cl = sc.cache.get("closed_loop")
    if cl is not None:
        res, base, _ = cl
        write_closed_loop_csv(res, out / "closed_loop.csv")
        write_plot_data(res.times, res.energies, out / "closed_loop_logE.dat")
        write_plot_data(base.times, base.energies, out / "open_loop_logE.dat")


def _worst(E: np.ndarray) -> np.ndarray:
    return E if E.ndim == 1 else E[:, int(np.argmax(E[-1]))] if E.shape[1] else E[:, 0]


def write_closed_loop_csv(res: nlw.ClosedLoopResult, path: Path) -> None:
    """Columns t, E_diff, |eta|, E_u, E_ref for the member with the largest final difference energy."""
    E = res.energies
    j = 0 if E.ndim == 1 else int(np.argmax(E[-1]))
    pick = lambda a: a if a.ndim == 1 else a[:, j]  # noqa: E731
    cols = [res.times, pick(E), pick(res.control_norms), pick(res.u_energies), res.ref_energies]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "E_diff", "eta_norm", "E_u", "E_ref"])
        for row in zip(*cols):
            w.writerow([f"{v:.12g}" for v in row])
    meta = {"schema_version": SCHEMA_VERSION, "member": j, "columns": ["t", "E_diff", "eta_norm", "E_u", "E_ref"]}
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")


def write_plot_data(times: np.ndarray, energies: np.ndarray, path: Path) -> None:
    E = _worst(np.asarray(energies))
    with open(path, "w") as fh:
        fh.write("# t log(E)\n")
        for t, e in zip(times, E):
            fh.write(f"{t:.10g} {math.log(e) if e > 0 else float('-inf')}\n")


# ---------------------------------------------------------------- commutator probe


def probe_commutator(cfg: ScenarioConfig) -> dict:
    cc = cfg.commutator
    dom = spectral.DomainSpec(cfg.domain.kind, tuple(cfg.domain.lengths), tuple(cfg.domain.x0), cfg.domain.delta)
    basis = spectral.build_basis(dom, cc.n_modes)
    if cc.cutoff == "constant":
        a = spectral.CutoffField.constant(basis, 1.0)
        width = None
    else:
        a = spectral.collar_cutoff(basis, cfg.control.cutoff_width or None)
        width = a.width
    lo, hi = cc.psi_support
    psi = spectral.bump(lo, hi)
    # resolvable range: psi's band inside the stored spectrum, wavelength below the cutoff width
    h_small = 1.02 * math.sqrt(hi / basis.lambda_max)
    h_big = 0.98 * width / (2 * math.pi) if width else 1.0
    h_big = min(1.0, max(h_big, 1.5 * h_small))
    hs = np.geomspace(h_big, h_small, cc.points)
    scan = spectral.commutator_norm_scan(a, psi, hs, (cc.source, cc.target), basis, length_scale=width)
    return jsonable({"n_modes": basis.n_modes, "cutoff": cc.cutoff, "h": scan.hs, "norms": scan.norms,
                     "resolvable": scan.resolvable, "slope": scan.slope, "zero": bool(np.all(scan.norms == 0)),
                     "norm_spec": list(scan.norm_spec)})


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavestab", description="Feedback stabilisation of damped nonlinear waves.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML scenario file")
    common.add_argument("--preset", choices=sorted(PRESET_CONFIGS), help="built-in scenario")
    common.add_argument("--out", metavar="DIR", default=None, help="output directory (default: config output)")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--stage", choices=STAGES, default=None, help="stop after this stage")
    common.add_argument("--quiet", action="store_true", help="suppress progress logging")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "integrate the forced reference trajectory",
        "observability": "Gramians of the free and linearised flow",
        "synthesize": "window-by-window interval controls",
        "feedback": "Riccati feedback law and its linear decay check",
        "closed-loop": "nonlinear closed loop with the perturbation-size search",
        "probe-commutator": "commutator norm scan over h",
        "run": "every stage in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        cfg = load_config(args.config, args.preset, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output)
    if args.command == "probe-commutator":
        t0 = time.perf_counter()
        try:
            rep = probe_commutator(cfg)
        except (ValueError, spectral.DomainError) as exc:
            print(f"probe-commutator failed: {exc}", file=sys.stderr)
            return EXIT_STAGE
        out.mkdir(parents=True, exist_ok=True)
        doc = {"schema_version": SCHEMA_VERSION, "command": "probe-commutator", "status": "ok", "report": rep,
               "config": jsonable(cfg.to_dict()), "seconds": round(time.perf_counter() - t0, 3)}
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if not args.quiet:
            print(f"slope {rep['slope']} zero {rep['zero']}")
        return EXIT_OK
    stages = COMMAND_STAGES[args.command]
    if args.stage is not None:
        if args.stage not in stages:
            print(f"config error: stage {args.stage!r} is not part of {args.command}", file=sys.stderr)
            return EXIT_CONFIG
        stages = stages[: stages.index(args.stage) + 1]
    report = run_pipeline(cfg, stages, args.command)
    write_outputs(report, out)
    if not args.quiet:
        print(f"{args.command}: {report.status}" + (f" at {report.failed_stage}: {report.message}" if report.failed_stage else ""))
    return report.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
