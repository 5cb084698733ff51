"""Configuration, scenario orchestration and file output.

Usage::

    kflow <scenario> --config run.json [--out DIR] [--seed N]

Scenarios: cap, flow, verify, exhaust, convergence.  Exit codes: 0 success with no
audit violations, 2 completed with violations, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError,
                      field_validator, model_validator)

from . import barrier as bar
from . import estimates as est
from . import flow as fl
from .errors import FlowDiverged, KflowError
from .grids import PolarGrid, RadialGrid
from .initial import random_polar_data, random_radial_data
from .model import BUILTIN_MODELS, WarpedModel, builtin, compile_profile, custom, sigma_supremum
from .operators import mean_curvature

log = logging.getLogger("kflow")

SCENARIOS = ("cap", "flow", "verify", "exhaust", "convergence")


class ConfigError(KflowError, ValueError):
    """Schema violation; the message names the offending key path."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Block):
    name: str = "euclidean"
    n: int = Field(2, ge=2)
    xi_expr: Optional[str] = None
    rho_expr: Optional[str] = None
    ricci_lower_bound: Optional[float] = Field(None, ge=0)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in BUILTIN_MODELS + ("custom",):
            raise ValueError(f"unknown model {v!r}")
        return v

    @model_validator(mode="after")
    def _custom_fields(self):
        if self.name == "custom":
            if self.xi_expr is None or self.rho_expr is None or self.ricci_lower_bound is None:
                raise ValueError("custom models need xi_expr, rho_expr and ricci_lower_bound")
            for key in ("xi_expr", "rho_expr"):
                try:
                    compile_profile(getattr(self, key))
                except Exception as exc:
                    raise ValueError(f"{key}: {exc}") from None
        elif self.xi_expr is not None or self.rho_expr is not None:
            raise ValueError("xi_expr and rho_expr are only accepted for custom models")
        return self


class GridBlock(_Block):
    r0: PositiveFloat = 1.0
    m: int = Field(64, ge=16)
    m_theta: Optional[int] = Field(None, ge=8)

    @field_validator("m_theta")
    @classmethod
    def _even(cls, v):
        if v is not None and v % 2:
            raise ValueError("m_theta must be even")
        return v


class FlowBlock(_Block):
    sigma: float = 0.0
    scheme: Literal["explicit", "semi-implicit"] = "explicit"
    cfl: float = Field(0.9, gt=0, le=1)
    t_final: float = Field(0.5, ge=0)
    snapshot_every: PositiveFloat = 0.05
    newton_tol: PositiveFloat = 1e-10
    residual_tol: PositiveFloat = 1e-8
    dt: Optional[PositiveFloat] = None


class BarrierBlock(_Block):
    R: Optional[PositiveFloat] = None
    r0: Optional[PositiveFloat] = None
    sigma: Optional[float] = None
    resolution: int = Field(256, ge=16)


class InitialBlock(_Block):
    kind: Literal["random", "cap", "constant", "expression"] = "random"
    amplitude: float = 0.5
    terms: PositiveInt = 6
    modes: PositiveInt = 3
    value: float = 0.0
    expression: Optional[str] = None
    cap_R: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def _expr(self):
        if self.kind == "expression":
            if self.expression is None:
                raise ValueError("expression data need 'expression'")
            compile_profile(self.expression)
        return self


class OutputBlock(_Block):
    directory: str = "kflow-out"
    formats: List[Literal["csv", "json"]] = ["csv", "json"]


class VerifyBlock(_Block):
    trace: Optional[str] = None
    envelope_tol: PositiveFloat = 1e-3
    gradient_tol: PositiveFloat = 1e-6
    localization_radius: Optional[PositiveFloat] = None
    C: Optional[float] = Field(None, ge=0)
    C_tilde: Optional[float] = Field(None, ge=0)


class ExhaustBlock(_Block):
    radii: List[PositiveFloat] = [2.0, 4.0, 8.0]
    compact_radius: PositiveFloat = 1.0
    T: float = Field(0.5, ge=0)
    spacing: PositiveFloat = 0.02
    u0: str = "exp(-r^2)"

    @field_validator("u0")
    @classmethod
    def _parse(cls, v):
        compile_profile(v)
        return v


class ConvergenceBlock(_Block):
    metric: Literal["stationarity", "cmc"] = "stationarity"
    refinements: int = Field(3, ge=3)
    cap_R: PositiveFloat = 1.0


class SweepBlock(_Block):
    seeds: List[int] = []


class RunConfig(_Block):
    scenario: Literal["cap", "flow", "verify", "exhaust", "convergence"]
    model: ModelBlock = ModelBlock()
    grid: GridBlock = GridBlock()
    flow: FlowBlock = FlowBlock()
    barrier: BarrierBlock = BarrierBlock()
    initial: InitialBlock = InitialBlock()
    output: OutputBlock = OutputBlock()
    verify: VerifyBlock = VerifyBlock()
    exhaust: ExhaustBlock = ExhaustBlock()
    convergence: ConvergenceBlock = ConvergenceBlock()
    sweep: SweepBlock = SweepBlock()
    seed: int = 0

    @model_validator(mode="after")
    def _scenario_needs(self):
        if self.scenario == "cap" and self.barrier.R is None:
            raise ValueError("the cap scenario needs barrier.R")
        if self.grid.m_theta is not None and self.model.n != 2:
            raise ValueError("polar grids need model.n = 2")
        return self


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def build_model(block: ModelBlock) -> WarpedModel:
    if block.name == "custom":
        return custom(block.n, block.xi_expr, block.rho_expr, block.ricci_lower_bound)
    return builtin(block.name, block.n)


def parse_config(text: str) -> RunConfig:
    """Validate a JSON document; warns (OutsideTheoremWarning) for inadmissible sigma."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from None
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    sigma = _run_sigma(cfg)
    if sigma is not None:
        model = build_model(cfg.model)
        threshold = fl.admissibility_threshold(model, cfg.grid.r0)
        if sigma >= threshold:
            warnings.warn(f"outside-theorem sigma: sigma={sigma} >= sampled threshold {threshold:.6g}",
                          fl.OutsideTheoremWarning, stacklevel=2)
    return cfg


def _run_sigma(cfg: RunConfig) -> Optional[float]:
    if cfg.scenario == "cap":
        return cfg.barrier.sigma
    return cfg.flow.sigma


# -- helpers ---------------------------------------------------------------------------


def _flow_config(cfg: RunConfig, **over) -> fl.FlowConfig:
    b = cfg.flow
    kw = dict(sigma=b.sigma, scheme=b.scheme, cfl=b.cfl, t_final=b.t_final,
              snapshot_every=b.snapshot_every, newton_tol=b.newton_tol,
              residual_tol=b.residual_tol, seed=cfg.seed, dt=b.dt)
    kw.update(over)
    return fl.FlowConfig(**kw)


def _grid(cfg: RunConfig):
    g = cfg.grid
    if g.m_theta is not None:
        return PolarGrid(g.r0, g.m, g.m_theta)
    return RadialGrid(g.r0, g.m)


def _initial(cfg: RunConfig, model: WarpedModel, grid, seed: int):
    b = cfg.initial
    polar = isinstance(grid, PolarGrid)
    if b.kind == "random":
        if polar:
            return random_polar_data(seed, grid.r0, b.modes, b.terms, b.amplitude, b.value)
        return random_radial_data(seed, grid.r0, b.terms, b.amplitude, b.value)
    if b.kind == "constant":
        return (lambda r, th: b.value + 0 * r) if polar else (lambda r: b.value + 0 * r)
    if b.kind == "expression":
        f = compile_profile(b.expression)
        return (lambda r, th: f(r)[0]) if polar else (lambda r: f(r)[0])
    R = b.cap_R if b.cap_R is not None else grid.r0
    cap = bar.cap_profile(model, R, 64)
    return (lambda r, th: b.value + cap.height(np.ravel(r)).reshape(np.shape(r))) if polar \
        else (lambda r: b.value + cap.height(r))


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list, columns: list, meta: Optional[dict] = None):
    with open(path, "w", newline="") as fh:
        if meta:
            for k, v in meta.items():
                fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def _echo(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


# -- scenarios ---------------------------------------------------------------------------


def _run_cap(cfg: RunConfig, out: Path) -> int:
    model = build_model(cfg.model)
    prof = bar.cap_profile(model, cfg.barrier.R, cfg.barrier.resolution)
    meta = {"model": model.name, "n": model.n, "R": _fmt(prof.R), "H_R": _fmt(prof.H_R)}
    _write_csv(out / "cap.csv", ["r", "v", "v_prime", "phi"],
               [prof.r, prof.v, prof.v_prime, prof.phi], meta)
    _write_json(out / "summary.json", {"config": _echo(cfg), "status": "ok", "exit": 0,
                                       "R": prof.R, "H_R": prof.H_R,
                                       "center_height": prof.center_height})
    return 0


def _snapshot_columns(grid, snap):
    if isinstance(grid, PolarGrid):
        rr, tt = grid.mesh()
        return (["r", "theta", "u", "W", "nH", "absA"],
                [rr.ravel(), tt.ravel(), np.ravel(snap.state.u), np.ravel(snap.W),
                 np.ravel(snap.nH), np.ravel(snap.absA)])
    return (["r", "u", "W", "nH", "absA"],
            [grid.nodes, snap.state.u, snap.W, snap.nH, snap.absA])


def _diag_dict(d: est.Diagnostics) -> dict:
    return {k: getattr(d, k) for k in d.__dataclass_fields__}


def _write_trace(trace, out: Path, cfg: RunConfig, status: str, exit_code: int, extra=None):
    snaps = out / "snapshots"
    snaps.mkdir(parents=True, exist_ok=True)
    for k, snap in enumerate(trace.snapshots):
        header, cols = _snapshot_columns(trace.grid, snap)
        _write_csv(snaps / f"snapshot_{k:04d}.csv", header, cols, {"t": _fmt(snap.t)})
    payload = {
        "config": _echo(cfg),
        "status": status,
        "exit": exit_code,
        "outside_theorem": trace.outside_theorem,
        "steps": trace.steps,
        "times": [s.t for s in trace.snapshots],
        "diagnostics": [_diag_dict(s.diagnostics) for s in trace.snapshots],
    }
    if extra:
        payload.update(extra)
    _write_json(out / "summary.json", payload)


def _flow_once(cfg: RunConfig, out: Path, seed: int) -> int:
    model = build_model(cfg.model)
    grid = _grid(cfg)
    u0 = _initial(cfg, model, grid, seed)
    fcfg = _flow_config(cfg, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    evolve = fl.evolve_polar if isinstance(grid, PolarGrid) else fl.evolve
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", fl.OutsideTheoremWarning)
        try:
            trace = evolve(model, grid, u0, fcfg)
        except FlowDiverged as exc:
            if exc.trace is not None:
                _write_trace(exc.trace, out, cfg, f"diverged: {exc}", 1)
            log.error("%s", exc)
            return 1
    extra = {"sigma_threshold": {
        "run_ball": sigma_supremum(model, grid.r0).value,
        "global_sample": fl.admissibility_threshold(model, grid.r0),
    }}
    code = 0
    if cfg.flow.sigma >= bar.cap_mean_curvature(model, grid.r0):
        env = est.check_height_envelope(trace, model, grid.r0, cfg.flow.sigma, cfg.verify.envelope_tol)
        extra["envelope"] = env.to_dict()
        if not env.ok:
            code = 2
    else:
        extra["envelope"] = {"check": "height_envelope", "status": "not-applicable"}
    _write_trace(trace, out, cfg, "ok" if code == 0 else "violations", code, extra)
    return code


def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("KFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _run_flow(cfg: RunConfig, out: Path) -> int:
    seeds = cfg.sweep.seeds
    if not seeds:
        return _flow_once(cfg, out, cfg.seed)
    with ThreadPoolExecutor(max_workers=sweep_threads()) as pool:
        codes = list(pool.map(lambda s: _flow_once(cfg, out / f"seed_{s:06d}", s), seeds))
    _write_json(out / "sweep.json", {"config": _echo(cfg), "seeds": seeds, "exit_codes": codes})
    return max(codes)


def _read_csv(path: Path):
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    rows = []
    header = None
    for line in lines:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif header is None:
            header = line.split(",")
        elif line:
            rows.append([float(x) for x in line.split(",")])
    data = np.array(rows)
    return meta, {h: data[:, i] for i, h in enumerate(header)}


def load_trace(directory) -> "fl.FlowTrace":
    """Rebuild a FlowTrace from the output of the flow scenario."""
    directory = Path(directory)
    summary = json.loads((directory / "summary.json").read_text())
    cfg = RunConfig.model_validate(summary["config"])
    model = build_model(cfg.model)
    grid = _grid(cfg)
    snaps = []
    for path in sorted((directory / "snapshots").glob("snapshot_*.csv")):
        meta, cols = _read_csv(path)
        t = float(meta["t"])
        shape = grid.shape
        u = cols["u"].reshape(shape)
        snap = est.make_diagnostics(model, grid, fl.GraphState(u, t))
        snap.W = cols["W"].reshape(shape)
        snap.nH = cols["nH"].reshape(shape)
        snap.absA = cols["absA"].reshape(shape)
        snaps.append(snap)
    trace = fl.FlowTrace(snaps, grid, _flow_config(cfg), model, steps=summary.get("steps", 0),
                         outside_theorem=summary.get("outside_theorem", False))
    return trace, cfg


def _run_verify(cfg: RunConfig, out: Path) -> int:
    source = Path(cfg.verify.trace) if cfg.verify.trace else out
    trace, run_cfg = load_trace(source)
    model = trace.model
    grid = trace.grid
    sigma = run_cfg.flow.sigma
    v = cfg.verify
    R = grid.r0
    ctx = est.trace_context(trace, R)
    budget = est.budget(model, R, sigma, ctx, C=v.C, C_tilde=v.C_tilde)
    checks = [est.check_gradient_bound(trace, budget, v.gradient_tol)]
    if sigma >= bar.cap_mean_curvature(model, R):
        checks.append(est.check_height_envelope(trace, model, R, sigma, v.envelope_tol))
    checks.append(est.check_curvature_bound(trace, budget, R, v.localization_radius))
    failed = any(c.violations for c in checks)
    code = 2 if failed else 0
    _write_json(out / "audit.json", {
        "source": str(source),
        "checks": [c.to_dict() for c in checks],
        "budget": dict(budget.__dict__),
        "exit": code,
    })
    return code


def _run_exhaust(cfg: RunConfig, out: Path) -> int:
    model = build_model(cfg.model)
    b = cfg.exhaust
    f = compile_profile(b.u0)
    rep = fl.exhaustion_study(model, lambda r: f(r)[0], b.radii, b.compact_radius, b.T,
                              _flow_config(cfg), spacing=b.spacing)
    code = 0 if rep.nonincreasing else 2
    _write_json(out / "exhaust.json", {
        "config": _echo(cfg), "radii": rep.radii, "compact_radius": rep.compact_radius,
        "T": rep.T, "spacing": rep.spacing, "differences": rep.differences,
        "comparisons": rep.comparisons, "nonincreasing": rep.nonincreasing, "exit": code,
    })
    return code


@dataclass
class OrderReport:
    metric: str
    m: list
    h: list
    errors: list
    orders: Union[list, str]
    meta: dict = field(default_factory=dict)

    @property
    def observed_order(self):
        if isinstance(self.orders, str):
            return self.orders
        return min(self.orders)

    def to_dict(self):
        return {"metric": self.metric, "m": self.m, "h": self.h, "errors": self.errors,
                "orders": self.orders, "observed_order": self.observed_order, **self.meta}


def _stationarity_error(model, R, r0, m, t_final, cfl):
    grid = RadialGrid(r0, m)
    cap = bar.cap_profile(model, R, 64)
    u0 = cap.height(grid.nodes)
    cfg = fl.FlowConfig(sigma=cap.H_R, t_final=t_final, snapshot_every=t_final / 20 if t_final else 1.0,
                        cfl=cfl)
    trace = fl.evolve(model, grid, u0, cfg)
    return max(float(np.max(np.abs(s.state.u - u0))) for s in trace.snapshots)


def _cmc_error(model, R, r0, m):
    grid = RadialGrid(r0, m)
    cap = bar.cap_profile(model, R, 64)
    nH = mean_curvature(model, grid, cap.height(grid.nodes))
    return float(np.max(np.abs(nH[:-3] - model.n * cap.H_R)))


def convergence_study(config: RunConfig, refinements: int = 3, ms: Optional[list] = None) -> OrderReport:
    """Observed spatial order of a scenario metric under grid refinement.

    Levels use ``m_k = (m_0 - 1) 2^k + 1`` so the spacing halves exactly; ``ms``
    overrides the node counts.  Orders are ``log(e_k/e_{k+1}) / log(h_k/h_{k+1})``.
    """
    if refinements < 3:
        raise ValueError("a convergence study needs at least 3 refinement levels")
    model = build_model(config.model)
    r0 = config.grid.r0
    if ms is None:
        ms = [(config.grid.m - 1) * 2 ** k + 1 for k in range(refinements)]
    elif len(ms) < 3:
        raise ValueError("a convergence study needs at least 3 refinement levels")
    R = config.convergence.cap_R
    if r0 >= R:
        raise ValueError("the grid radius must be smaller than the cap radius")
    metric = config.convergence.metric
    errors = []
    for m in ms:
        if metric == "stationarity":
            errors.append(_stationarity_error(model, R, r0, m, config.flow.t_final, config.flow.cfl))
        else:
            errors.append(_cmc_error(model, R, r0, m))
    hs = [r0 / (m - 1) for m in ms]
    if all(b < a for a, b in zip(errors, errors[1:])) and min(errors) > 0:
        orders = [math.log(a / b) / math.log(ha / hb)
                  for a, b, ha, hb in zip(errors, errors[1:], hs, hs[1:])]
    else:
        orders = "n/a"
    return OrderReport(metric, list(ms), hs, errors, orders,
                       {"cap_R": R, "r0": r0, "h_ratios": [a / b for a, b in zip(hs, hs[1:])]})


def _run_convergence(cfg: RunConfig, out: Path) -> int:
    rep = convergence_study(cfg, cfg.convergence.refinements)
    code = 0 if rep.orders != "n/a" else 2
    _write_json(out / "convergence.json", {"config": _echo(cfg), **rep.to_dict(), "exit": code})
    return code


_RUNNERS = {"cap": _run_cap, "flow": _run_flow, "verify": _run_verify,
            "exhaust": _run_exhaust, "convergence": _run_convergence}


def run_scenario(config: RunConfig, out: Optional[Union[str, Path]] = None) -> int:
    """Run the configured scenario; returns the exit status (0, 1 or 2)."""
    out = Path(out if out is not None else config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _RUNNERS[config.scenario](config, out)
    except (KflowError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        log.error("%s failed: %s", config.scenario, exc)
        _write_json(out / "error.json", {"scenario": config.scenario, "error": str(exc), "exit": 1})
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kflow", description=__doc__.splitlines()[0])
    parser.add_argument("scenario", choices=SCENARIOS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides output.directory)")
    parser.add_argument("--seed", type=int, help="seed for generated initial data")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        data = json.loads(text)
        data["scenario"] = args.scenario
        if args.seed is not None:
            data["seed"] = args.seed
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", fl.OutsideTheoremWarning)
            cfg = parse_config(json.dumps(data))
        for w in caught:
            log.warning("%s", w.message)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        log.error("%s", exc)
        return 1
    return run_scenario(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
