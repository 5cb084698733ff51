"""A-priori estimate constants and audits of flow traces against them.

Every audit is one-sided: it compares an observed quantity with a bound and
reports margins ``bound - observed`` (negative means violated).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, ParameterError
from .grids import PolarGrid, RadialGrid
from .model import WarpedModel, zeta_bar
from .operators import polar_fields, radial_fields


# -- diagnostics ------------------------------------------------------------------------


@dataclass
class Diagnostics:
    t: float
    sup_abs_u: float
    sup_W: float             # interior nodes
    sup_W_boundary: float
    sup_absA: float          # interior nodes
    nH_range: tuple
    envelope_margin_upper: Optional[float] = None
    envelope_margin_lower: Optional[float] = None
    gradient_bound_margin: Optional[float] = None
    curvature_bound_margin: Optional[float] = None


def _radial_shape(model: WarpedModel, grid: RadialGrid, u: np.ndarray):
    f = radial_fields(model, grid, u)
    n = model.n
    r = grid.nodes
    x, dx, _ = model.xi(r)
    ks = np.empty_like(u)
    ks[1:] = (f.g_node[1:] / f.W[1:]) * dx[1:] / x[1:]
    ks[0] = f.nH[0] / n
    kp = f.nH - (n - 1) * ks
    return kp, ks, f


def shape_operator_norm(model: WarpedModel, grid, state) -> np.ndarray:
    """|A| from the rotational and profile principal curvatures of a radial graph.

    The rotational curvature is ``(u'/W) xi'/xi`` and the profile curvature is what
    remains of ``nH``.  Polar states are averaged over theta first.
    """
    u = np.asarray(getattr(state, "u", state), dtype=float)
    if isinstance(grid, PolarGrid):
        u = u.mean(axis=1)
        grid = grid.radial()
    kp, ks, _ = _radial_shape(model, grid, u)
    return np.sqrt(kp ** 2 + (model.n - 1) * ks ** 2)


def principal_curvatures(model: WarpedModel, grid: RadialGrid, state):
    """``(kappa_profile, kappa_rotational)`` at the radial nodes."""
    u = np.asarray(getattr(state, "u", state), dtype=float)
    kp, ks, _ = _radial_shape(model, grid, u)
    return kp, ks


def make_diagnostics(model: WarpedModel, grid, state):
    """Snapshot (fields plus Diagnostics) of a state."""
    from .flow import Snapshot

    u = np.asarray(state.u, dtype=float)
    if isinstance(grid, PolarGrid):
        f = polar_fields(model, grid, u)
        absA_r = shape_operator_norm(model, grid, u)
        absA = np.repeat(absA_r[:, None], grid.m_theta, axis=1)
    else:
        f = radial_fields(model, grid, u)
        absA = shape_operator_norm(model, grid, u)
    W, nH = f.W, f.nH
    diag = Diagnostics(
        t=float(state.t),
        sup_abs_u=float(np.max(np.abs(u))),
        sup_W=float(np.max(W[:-1])),
        sup_W_boundary=float(np.max(W[-1])),
        sup_absA=float(np.max(absA[:-1])),
        nH_range=(float(np.min(nH[:-1])), float(np.max(nH[:-1]))),
    )
    return Snapshot(float(state.t), state, W, nH, absA, diag)


# -- budget ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceContext:
    """Sup-data of a trace over a localisation ball."""

    sup_abs_s: float
    sup_s_pole: float
    sup_W: float
    T: float


def trace_context(trace, R: Optional[float] = None) -> TraceContext:
    grid = trace.grid
    r = grid.r if isinstance(grid, PolarGrid) else grid.nodes
    R = grid.r0 if R is None else R
    inside = r <= R * (1 + 1e-12)
    sup_s = max(float(np.max(np.abs(np.asarray(s.state.u)[inside]))) for s in trace.snapshots)
    pole = max(float(np.ravel(s.state.u)[0]) for s in trace.snapshots)
    sup_W = max(float(np.max(np.asarray(s.W)[inside])) for s in trace.snapshots)
    return TraceContext(sup_s, pole, sup_W, float(trace.snapshots[-1].t))


@dataclass(frozen=True)
class EstimateBudget:
    L: float
    R: float
    sigma: float
    C_R: float
    lam: float
    beta: float
    alpha: float
    gamma: float
    delta: float
    C1: float
    # variants and auxiliary constants
    C_R_curvature: float
    C_R_alternative: float
    delta_tilde: float
    delta_tilde_interior: float
    C: float
    C_tilde: float
    eps: float
    a: float
    b: float
    c: float
    q: float
    sup_rho: float
    inf_rho: float
    sup_dlogrho: float
    sup_W: float
    curvature_linear: float
    curvature_cubic: float

    def curvature_bound(self, sup_W: Optional[float] = None) -> float:
        """``(C sup W + C' sup W^3) xi(R)/zeta(R)``; nondecreasing in sup W."""
        s = self.sup_W if sup_W is None else sup_W
        return (self.curvature_linear * s + self.curvature_cubic * s ** 3) * self.q


def _default_constants(model, dlog, ddlog_abs):
    if model.name == "euclidean":
        return 0.0, 0.0
    # surrogate: derivatives of log(rho) and the curvature lower bound
    return 0.0, float(model.ricci_lower_bound + np.max(dlog) + np.max(ddlog_abs))


def budget(model: WarpedModel, R: float, sigma: float, context: TraceContext,
           C: Optional[float] = None, C_tilde: Optional[float] = None,
           eps: Optional[float] = None, samples: int = 2001) -> EstimateBudget:
    if not R > 0:
        raise DomainError("localisation radius must be positive")
    if not context.sup_W > 0 or not math.isfinite(context.sup_W):
        raise ParameterError("sup W must be positive and finite")
    n = model.n
    r = R * np.arange(samples) / (samples - 1)
    x, dx, _ = model.xi(r)
    p, dp, ddp = model.rho(r)
    dlog = np.abs(dp / p)
    C_def, Ct_def = _default_constants(model, dlog, np.abs(ddp / p))
    C = C_def if C is None else float(C)
    C_tilde = Ct_def if C_tilde is None else float(C_tilde)
    if C < 0 or C_tilde < 0:
        raise ParameterError("C and C_tilde must be non-negative")

    zR = zeta_bar(model, R)
    sup_rho, inf_rho = float(p.max()), float(p.min())
    C_R = n * float(np.max(dx + abs(sigma) * x))
    C_R_curv = float(np.max(dx + sigma * x))
    C_R_alt = float(np.max(n * dx + dp / p + n * sigma * x))
    beta = (context.sup_abs_s - context.sup_s_pole) / zR
    lam = 8 * beta ** 2 * C_R * sup_rho ** 2
    alpha = float(np.max(2 * dlog + n * abs(sigma)))
    dt_int = 2 * float(np.max(2 * dlog + 2 * x + n * abs(sigma)))
    gamma = 1.0 / sup_rho ** 2
    delta = gamma / (2 * context.sup_W ** 2)
    delta_t = delta / (1 - delta)
    L = float(model.ricci_lower_bound)
    if eps is None:
        eps = delta / (sigma * (1 - delta)) if sigma > 0 else 1.0
    a = 2 * delta - sigma * eps * (1 - delta)
    if not a > 0:
        raise ParameterError(f"eps={eps} makes a = {a} non-positive")
    b = 2 * (C_tilde + delta_t * L) + sigma / eps
    k_rho = float(dlog.max())
    c = 4 / delta * k_rho
    q = float(model.xi(np.asarray(R))[0]) / zR
    first = (2 * C) ** 1.5 / math.sqrt(delta)
    second = 4 / delta ** 1.5 * q + math.sqrt(
        max(16 / delta ** 3 * q * q + (6 * q * q + 2 * c * q + b) / delta, 0.0))
    C1 = max(first, second)

    # C1 <= lin * sup W + cub * sup W^3 using 1/delta = g sup W^2 and delta_tilde <= 1
    g = 2 / gamma
    b_max = max(2 * (C_tilde + L) + sigma / eps, 0.0)
    root = math.sqrt(8 * k_rho * q)
    lin = (2 * C) ** 1.5 * math.sqrt(g) + math.sqrt(g) * math.sqrt(6 * q * q + b_max) + 0.5 * g * root
    cub = 8 * g ** 1.5 * q + 0.5 * g * root
    return EstimateBudget(
        L=L, R=float(R), sigma=float(sigma), C_R=C_R, lam=lam, beta=beta, alpha=alpha,
        gamma=gamma, delta=delta, C1=C1, C_R_curvature=C_R_curv, C_R_alternative=C_R_alt,
        delta_tilde=delta_t, delta_tilde_interior=dt_int, C=C, C_tilde=C_tilde, eps=float(eps),
        a=a, b=b, c=c, q=q, sup_rho=sup_rho, inf_rho=inf_rho, sup_dlogrho=k_rho,
        sup_W=float(context.sup_W), curvature_linear=2 * lin / q, curvature_cubic=2 * cub / q,
    )


# -- audits ------------------------------------------------------------------------------


@dataclass
class AuditReport:
    name: str
    margins: np.ndarray
    violations: list = field(default_factory=list)
    worst_margin: float = math.inf
    note: str = ""

    @property
    def ok(self) -> bool:
        return not self.violations and not self.note.startswith("localization infeasible")

    def to_dict(self) -> dict:
        return {
            "check": self.name,
            "status": "pass" if self.ok else ("infeasible" if self.note.startswith("localization") else "fail"),
            "worst_margin": None if not math.isfinite(self.worst_margin) else float(self.worst_margin),
            "violations": [list(map(_jsonable, v)) if isinstance(v, tuple) else _jsonable(v)
                           for v in self.violations],
            "note": self.note,
        }


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def check_gradient_bound(trace, budget_or_L, tol: float = 1e-6) -> AuditReport:
    """Interior ``sup W(t) <= e^{Lt} max(sup W(0), sup of boundary W up to t)`` per snapshot."""
    L = getattr(budget_or_L, "L", budget_or_L)
    L = float(L)
    W0 = float(np.max(trace.snapshots[0].W))
    margins = []
    boundary = -math.inf
    for snap in trace.snapshots:
        W = np.asarray(snap.W)
        boundary = max(boundary, float(np.max(W[-1])))
        bound = math.exp(L * snap.t) * max(W0, boundary)
        margins.append(bound - float(np.max(W[:-1])))
        snap.diagnostics.gradient_bound_margin = margins[-1]
    margins = np.array(margins)
    bad = [int(k) for k in np.nonzero(margins < -tol)[0]]
    return AuditReport("gradient_bound", margins, bad, float(margins.min()))


def check_height_envelope(trace, model: WarpedModel, r0: float, sigma: float,
                          tol: float = 1e-3) -> AuditReport:
    """Compare every snapshot with the cap envelopes started from the initial data."""
    from .barrier import envelope_series

    grid = trace.grid
    r = grid.r if isinstance(grid, PolarGrid) else grid.nodes
    u0 = np.asarray(trace.snapshots[0].state.u)
    times = trace.times
    lower, upper = envelope_series(model, r0, sigma, times, float(u0.max()), float(u0.min()), r)
    margins = []
    bad = []
    for k, snap in enumerate(trace.snapshots):
        u = np.asarray(snap.state.u)
        up, lo = upper[k], lower[k]
        if u.ndim == 2:
            up, lo = up[:, None], lo[:, None]
        mu = up - u
        ml = u - lo
        snap.diagnostics.envelope_margin_upper = float(mu.min())
        snap.diagnostics.envelope_margin_lower = float(ml.min())
        margins.append(min(mu.min(), ml.min()))
        if mu.min() < -tol:
            bad.append((k, "upper", float(mu.min())))
        if ml.min() < -tol:
            bad.append((k, "lower", float(ml.min())))
    margins = np.array(margins)
    return AuditReport("height_envelope", margins, bad, float(margins.min()))


def localization_radius(model: WarpedModel, budget: EstimateBudget, T: float) -> Optional[float]:
    """Largest R' with ``zeta(R') + C_R T <= zeta(R)/2``, or None when no R' > 0 works."""
    half = 0.5 * zeta_bar(model, budget.R)
    room = half - max(budget.C_R_curvature, 0.0) * T
    if room <= 0:
        return None
    return brentq(lambda s: zeta_bar(model, s) - room, 0.0, budget.R, xtol=1e-13)


def check_curvature_bound(trace, budget: EstimateBudget, R: float,
                          R_prime: Optional[float] = None) -> AuditReport:
    """``sup |A|`` on B_{R'} x [0, T] against ``2 C1`` and the cubic-in-W bound."""
    model = trace.model
    T = float(trace.snapshots[-1].t)
    admissible = localization_radius(model, budget, T)
    if admissible is None or (R_prime is not None and R_prime > admissible * (1 + 1e-12)):
        return AuditReport("curvature_bound", np.array([]), [], math.inf,
                           note=f"localization infeasible for R={R}, T={T}")
    Rp = admissible if R_prime is None else R_prime
    grid = trace.grid
    r = grid.r if isinstance(grid, PolarGrid) else grid.nodes
    inside = r <= Rp * (1 + 1e-12)
    bound = min(2 * budget.C1, budget.curvature_bound())
    margins = []
    for snap in trace.snapshots:
        A = np.asarray(snap.absA)[inside]
        margins.append(bound - float(np.max(A)))
        snap.diagnostics.curvature_bound_margin = margins[-1]
    margins = np.array(margins)
    bad = [int(k) for k in np.nonzero(margins < 0)[0]]
    return AuditReport("curvature_bound", margins, bad, float(margins.min()),
                       note=f"R'={Rp:.6g}")


# -- boundary gradient barrier -----------------------------------------------------------


@dataclass
class BoundaryBarrier:
    L_h: float
    A_h: float
    d0: float
    eps: float
    gradient_bound: float
    d: np.ndarray
    residual: np.ndarray

    @property
    def min_residual(self) -> float:
        return float(np.min(self.residual))

    def h(self, d):
        return np.log1p(self.A_h * np.asarray(d)) / self.L_h


def boundary_gradient_barrier(model: WarpedModel, R: float, u0: Callable, params: dict,
                              sigma: float = 0.0, nodes: int = 400) -> BoundaryBarrier:
    """Barrier ``v = u0 + h(R - r)``, ``h(d) = log(1 + A_h d)/L_h``, on the collar d in [0, d0].

    Returns the residual ``-Q[v]`` (the barrier is static, so this is dv/dt - Q[v]) at
    collar points with d in (0, d0); u0 is differentiated numerically.
    """
    L_h = float(params["L_h"])
    d0 = float(params["d0"])
    eps = float(params.get("eps", d0))
    if not L_h > 0 or not d0 > 0:
        raise ParameterError("L_h and d0 must be positive")
    if d0 * L_h >= 1:
        raise ParameterError(f"need d0 < 1/L_h, got d0={d0}, L_h={L_h}")
    if not (d0 <= eps < R):
        raise ParameterError("collar width eps must satisfy d0 <= eps < R")
    A_h = float(params.get("A_h", L_h / (1 - L_h * d0)))
    n = model.n
    d = d0 * (np.arange(1, nodes) / nodes)
    r = R - d
    step = 1e-4 * R
    f0 = np.asarray(u0(r), dtype=float)
    fp = (np.asarray(u0(r + step)) - np.asarray(u0(r - step))) / (2 * step)
    fpp = (np.asarray(u0(r + step)) - 2 * f0 + np.asarray(u0(r - step))) / step ** 2
    hp = A_h / (L_h * (1 + A_h * d))
    hpp = -L_h * hp ** 2
    v1 = fp - hp              # d/dr of h(R - r) is -h'
    v2 = fpp + hpp
    x, dx, _ = model.xi(r)
    p, dp, _ = model.rho(r)
    W = np.sqrt(p ** -2 + v1 ** 2)
    dW = (v1 * v2 - dp / p ** 3) / W
    nH = v2 / W - v1 * dW / W ** 2 + (v1 / W) * ((n - 1) * dx / x + dp / p)
    residual = -W * (nH - n * sigma)
    return BoundaryBarrier(L_h, A_h, d0, eps, A_h / L_h, d, residual)


def search_boundary_barrier(model: WarpedModel, R: float, u0: Callable, sigma: float = 0.0,
                            tol: float = 1e-6) -> Optional[BoundaryBarrier]:
    """Try ``L_h`` in {5, 10, 20} times a scale read off the derivatives of u0.

    Returns the first barrier whose collar residual is >= -tol, else None.
    """
    r = np.linspace(0.0, R, 2001)
    h = r[1] - r[0]
    f = np.asarray(u0(r), dtype=float)
    d1 = np.gradient(f, h)
    d2 = np.gradient(d1, h)
    C_bar = max(1.0, float(np.max(np.abs(d1)) + np.max(np.abs(d2))))
    for factor in (5.0, 10.0, 20.0):
        L_h = factor * C_bar
        for frac in (0.5, 0.25, 0.75):
            d0 = min(frac / L_h, 0.5 * R)
            bar = boundary_gradient_barrier(model, R, u0, {"L_h": L_h, "d0": d0}, sigma=sigma)
            if bar.min_residual >= -tol:
                return bar
    return None
