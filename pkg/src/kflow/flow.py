"""Method-of-lines solver for the modified mean curvature flow of Killing graphs.

The height u over a geodesic ball evolves by ``du/dt = Q[u] = W (nH - n sigma)`` with
fixed Dirichlet data.  Two time integrators are provided: forward Euler under a
frozen-coefficient step restriction, and backward Euler with lagged W (Picard
iteration, banded or sparse linear solves).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.linalg import solve_banded
from scipy.sparse.linalg import spsolve

from .errors import FlowDiverged, NumericalError, ParameterError
from .grids import PolarGrid, RadialGrid, geometry_for
from .model import WarpedModel, sigma_supremum
from .operators import (divergence_balance, gradient_W, mean_curvature, polar_fields,
                        q_operator, radial_fields)

__all__ = [
    "GraphState", "FlowConfig", "Snapshot", "FlowTrace", "OutsideTheoremWarning",
    "gradient_W", "mean_curvature", "q_operator", "divergence_balance",
    "stable_dt", "step", "evolve", "evolve_polar", "exhaustion_study", "ExhaustionReport",
    "mollify",
]

SCHEMES = ("explicit", "semi-implicit")


class OutsideTheoremWarning(UserWarning):
    """sigma is not below the sampled admissibility threshold of the model."""


@dataclass(frozen=True)
class GraphState:
    u: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class FlowConfig:
    sigma: float = 0.0
    scheme: str = "explicit"
    cfl: float = 0.9
    t_final: float = 1.0
    snapshot_every: float = 0.1
    newton_tol: float = 1e-10
    residual_tol: float = 1e-8
    seed: int = 0
    # fixed step; overrides the CFL rule when set
    dt: Optional[float] = None
    # semi-implicit steps are this many explicit steps long unless dt is given
    implicit_factor: float = 20.0
    max_picard: int = 60
    guard_W: float = 1e6
    guard_factor: float = 1e3
    # consecutive sign-alternating growing updates tolerated before aborting
    oscillation_steps: int = 10

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ParameterError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0 < self.cfl <= 1:
            raise ParameterError("cfl must lie in (0, 1]")
        if not self.t_final >= 0:
            raise ParameterError("t_final must be non-negative")
        if not self.snapshot_every > 0:
            raise ParameterError("snapshot_every must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ParameterError("dt must be positive")


@dataclass
class Snapshot:
    t: float
    state: GraphState
    W: np.ndarray
    nH: np.ndarray
    absA: np.ndarray
    diagnostics: "Diagnostics"


@dataclass
class FlowTrace:
    snapshots: list
    grid: object
    config: FlowConfig
    model: WarpedModel
    steps: int = 0
    outside_theorem: bool = False

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def final(self) -> GraphState:
        return self.snapshots[-1].state


# -- one step -----------------------------------------------------------------------


def _radial_diag(model, grid, f):
    geo = geometry_for(model, grid)
    c = f.cond
    inflow = np.zeros(grid.m)
    inflow[:-1] += c
    inflow[1:] += c
    return f.W[:-1] * inflow[:-1] / geo.vol[:-1]


def _polar_diag(model, grid, f):
    geo = geometry_for(model, grid)
    dt = grid.dtheta
    pole = f.W[0, 0] * f.cond_r[0].sum() / (2 * np.pi * geo.vol[0])
    ring = (f.cond_r[1:] + f.cond_r[:-1] + f.cond_t[1:-1] + np.roll(f.cond_t[1:-1], 1, axis=1))
    ring = f.W[1:-1] * ring / (geo.vol[1:-1, None] * dt)
    return max(pole, float(ring.max()))


def _fields(model, grid, u):
    if isinstance(grid, PolarGrid):
        return polar_fields(model, grid, u)
    return radial_fields(model, grid, u)


def _max_diag(model, grid, f) -> float:
    if isinstance(grid, PolarGrid):
        return _polar_diag(model, grid, f)
    return float(_radial_diag(model, grid, f).max())


def stable_dt(model: WarpedModel, grid, state, cfl: float = 1.0) -> float:
    """Largest forward-Euler step for which the frozen-coefficient update is a
    convex combination of neighbouring values, scaled by ``cfl``."""
    u = np.asarray(getattr(state, "u", state), dtype=float)
    return cfl / _max_diag(model, grid, _fields(model, grid, u))


def _explicit(model, grid, u, f, sigma, dt):
    du = dt * f.W * (f.nH - model.n * sigma)
    new = u + du
    if isinstance(grid, PolarGrid):
        new[-1] = u[-1]
        new[0] = new[0].mean()
    else:
        new[-1] = u[-1]
    return new


def _radial_implicit(model, grid, u, sigma, dt, config):
    m = grid.m
    rhs_base = u.copy()
    cur = u.copy()
    geo = geometry_for(model, grid)
    change = np.inf
    for _ in range(config.max_picard):
        f = radial_fields(model, grid, cur)
        c = f.cond
        s = dt * f.W[:-1] / geo.vol[:-1]
        ab = np.zeros((3, m))
        ab[1, :] = 1.0
        left = np.concatenate([[0.0], c[:-1]])
        ab[1, :-1] += s * (left + c)
        ab[0, 1:] = -s * c                       # A[i, i+1]
        ab[2, : m - 2] = -s[1:] * c[:-1]         # A[i, i-1] stored at column i-1
        rhs = rhs_base.copy()
        rhs[:-1] -= dt * model.n * sigma * f.W[:-1]
        new = solve_banded((1, 1), ab, rhs)
        change = float(np.max(np.abs(new - cur)))
        cur = new
        if change <= config.newton_tol * (1.0 + float(np.max(np.abs(cur)))):
            return cur
    raise NumericalError(f"lagged-W iteration did not converge in {config.max_picard} sweeps",
                         residual=change, last_valid=u)


def _polar_implicit(model, grid, u, sigma, dt, config):
    geo = geometry_for(model, grid)
    m_r, m_t = grid.shape
    dth = grid.dtheta
    N = 1 + (m_r - 1) * m_t

    ii = np.arange(1, m_r)[:, None] * np.ones((1, m_t), dtype=int)
    jj = np.ones((m_r - 1, 1), dtype=int) * np.arange(m_t)[None, :]
    flat = (1 + (ii - 1) * m_t + jj).astype(int)

    def to_vec(a):
        return np.concatenate([[a[0].mean()], a[1:].ravel()])

    def to_grid(x):
        out = np.empty((m_r, m_t))
        out[0] = x[0]
        out[1:] = x[1:].reshape(m_r - 1, m_t)
        return out

    rhs_base = to_vec(u)
    cur = u.copy()
    change = np.inf
    for _ in range(config.max_picard):
        f = polar_fields(model, grid, cur)
        rows, cols, vals = [], [], []
        diag = np.ones(N)
        # pole
        s0 = dt * f.W[0, 0] / (2 * np.pi * geo.vol[0])
        cr0 = f.cond_r[0]
        diag[0] += s0 * cr0.sum()
        rows.append(np.zeros(m_t, dtype=int)); cols.append(flat[0]); vals.append(-s0 * cr0)
        # interior rings 1..m_r-2
        inner = slice(0, m_r - 2)   # rows of flat for rings 1..m_r-2
        W = f.W[1:-1]
        s = dt * W / (geo.vol[1:-1, None] * dth)
        c_out = f.cond_r[1:]           # to ring i+1
        c_in = f.cond_r[:-1]           # to ring i-1
        c_p = f.cond_t[1:-1]           # to j+1
        c_m = np.roll(f.cond_t[1:-1], 1, axis=1)   # to j-1
        me = flat[inner]
        diag[me.ravel()] += (s * (c_out + c_in + c_p + c_m)).ravel()
        rows.append(me.ravel()); cols.append(flat[1:m_r - 1].ravel()); vals.append((-s * c_out).ravel())
        below = np.vstack([np.zeros((1, m_t), dtype=int), flat[: m_r - 3]])
        rows.append(me.ravel()); cols.append(below.ravel()); vals.append((-s * c_in).ravel())
        rows.append(me.ravel()); cols.append(np.roll(me, -1, axis=1).ravel()); vals.append((-s * c_p).ravel())
        rows.append(me.ravel()); cols.append(np.roll(me, 1, axis=1).ravel()); vals.append((-s * c_m).ravel())
        rows.append(np.arange(N)); cols.append(np.arange(N)); vals.append(diag)
        A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(N, N))
        rhs = rhs_base.copy()
        rhs[0] -= dt * model.n * sigma * f.W[0, 0]
        rhs[me.ravel()] -= dt * model.n * sigma * W.ravel()
        new = to_grid(spsolve(A.tocsc(), rhs))
        change = float(np.max(np.abs(new - cur)))
        cur = new
        if change <= config.newton_tol * (1.0 + float(np.max(np.abs(cur)))):
            return cur
    raise NumericalError(f"lagged-W iteration did not converge in {config.max_picard} sweeps",
                         residual=change, last_valid=u)


class _RadialExplicit:
    """Forward-Euler kernel with the geometry factors of a radial grid precomputed."""

    def __init__(self, model, grid):
        geo = geometry_for(model, grid)
        h = grid.h
        self.rf2 = geo.rho_face ** -2
        self.r2 = geo.rho ** -2
        self.wfh = geo.w_face / h
        self.inv_vol = 1.0 / geo.vol[:-1]
        self.inv_h = 1.0 / h
        self.inv_2h = 0.5 / h
        self.n = model.n
        self.m = grid.m

    def __call__(self, u, sigma, cfl, dt_fixed, dt_cap):
        du = u[1:] - u[:-1]
        gf = du * self.inv_h
        cond = self.wfh / np.sqrt(self.rf2 + gf * gf)
        flux = cond * du
        net = np.empty(self.m - 1)
        net[0] = flux[0]
        net[1:] = flux[1:] - flux[:-1]
        g = np.empty(self.m)
        g[0] = 0.0
        g[1:-1] = (u[2:] - u[:-2]) * self.inv_2h
        g[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) * self.inv_2h
        W = np.sqrt(self.r2 + g * g)
        Wi = W[:-1]
        if dt_fixed is None:
            around = cond.copy()
            around[1:] += cond[:-1]
            dt = cfl / float(np.max(Wi * around * self.inv_vol))
        else:
            dt = dt_fixed
        if dt_cap is not None and dt_cap < dt:
            dt = dt_cap
        new = u.copy()
        new[:-1] += dt * Wi * (net * self.inv_vol - self.n * sigma)
        return new, dt, W


def _advance(model, grid, u, config, dt_cap=None):
    """Return ``(u_new, dt_used)`` for one step from u."""
    f = _fields(model, grid, u)
    if config.dt is not None:
        dt = config.dt
    else:
        dt = config.cfl / _max_diag(model, grid, f)
        if config.scheme == "semi-implicit":
            dt *= config.implicit_factor
    if dt_cap is not None:
        dt = min(dt, dt_cap)
    if config.scheme == "explicit":
        return _explicit(model, grid, u, f, config.sigma, dt), dt
    if isinstance(grid, PolarGrid):
        return _polar_implicit(model, grid, u, config.sigma, dt, config), dt
    return _radial_implicit(model, grid, u, config.sigma, dt, config), dt


def step(model: WarpedModel, grid, state: GraphState, config: FlowConfig) -> GraphState:
    """One time step; boundary values are left untouched."""
    u = np.array(state.u, dtype=float)
    new, dt = _advance(model, grid, u, config)
    return GraphState(new, state.t + dt)


# -- evolution ----------------------------------------------------------------------


def _sample(grid, u0):
    if callable(u0):
        if isinstance(grid, PolarGrid):
            rr, tt = grid.mesh()
            return np.asarray(u0(rr, tt), dtype=float) * np.ones(grid.shape)
        return np.asarray(u0(grid.nodes), dtype=float) * np.ones(grid.shape)
    u = np.array(u0, dtype=float)
    if u.shape != grid.shape:
        raise ParameterError(f"initial data has shape {u.shape}, grid expects {grid.shape}")
    return u


def _guard_scale(model, grid, u0, config):
    from .barrier import cap_center_height, cap_mean_curvature, radius_history

    base = float(np.max(np.abs(u0)))
    try:
        if config.sigma >= cap_mean_curvature(model, grid.r0):
            R = float(radius_history(model, grid.r0, config.sigma, [config.t_final])[0])
            return max(1.0, base + cap_center_height(model, R))
    except Exception:
        pass
    return max(1.0, base + grid.r0)


def _snapshot(model, grid, u, t):
    from .estimates import make_diagnostics

    return make_diagnostics(model, grid, GraphState(u.copy(), t))


def admissibility_threshold(model: WarpedModel, r0: float) -> float:
    """Sampled infimum of the sigma admissibility function on (0, max(50, 10 r0)]."""
    return sigma_supremum(model, max(50.0, 10.0 * r0)).value


def _evolve(model, grid, u0, config):
    u = _sample(grid, u0)
    if not np.all(np.isfinite(u)):
        raise ParameterError("initial data must be finite")
    if isinstance(grid, PolarGrid):
        u[0] = u[0].mean()
    outside = config.sigma >= admissibility_threshold(model, grid.r0)
    if outside:
        warnings.warn(f"sigma={config.sigma} is outside the admissible range of the model",
                      OutsideTheoremWarning, stacklevel=3)
    scale = config.guard_factor * _guard_scale(model, grid, u, config)
    trace = FlowTrace([_snapshot(model, grid, u, 0.0)], grid, config, model,
                      outside_theorem=bool(outside))
    t = 0.0
    n_snap = max(1, int(math.ceil(config.t_final / config.snapshot_every - 1e-12)))
    targets = [min(config.t_final, (k + 1) * config.snapshot_every) for k in range(n_snap)]
    if config.t_final == 0:
        return trace
    steps = 0
    prev_delta = None
    flips = 0
    fast = None
    if config.scheme == "explicit" and isinstance(grid, RadialGrid):
        fast = _RadialExplicit(model, grid)
    for target in targets:
        while t < target - 1e-14 * max(1.0, target):
            if fast is not None:
                u_new, dt, W = fast(u, config.sigma, config.cfl, config.dt, target - t)
            else:
                u_new, dt = _advance(model, grid, u, config, dt_cap=target - t)
                W = None
            bad = None
            # W belongs to the state before the step; the new state is checked next round
            if W is not None and float(np.max(W)) > config.guard_W:
                bad = f"W exceeded {config.guard_W:.3g}"
            delta = u_new - u
            size = float(np.max(np.abs(delta)))
            if prev_delta is not None:
                # grid-scale sawtooth: each update reverses and outgrows the previous one
                growing = size > prev_size and size > 1e-12 * (1.0 + float(np.max(np.abs(u))))
                flips = flips + 1 if growing and float(np.vdot(delta, prev_delta)) < 0 else 0
                if flips >= config.oscillation_steps and bad is None:
                    bad = f"sign-alternating growth over {flips} steps"
            prev_delta, prev_size = delta, size
            u = u_new
            t = target if abs(target - t - dt) <= 1e-14 * max(1.0, target) else t + dt
            steps += 1
            if bad is None:
                if not np.all(np.isfinite(u)):
                    bad = "non-finite heights"
                elif float(np.max(np.abs(u))) > scale:
                    bad = f"sup|u| exceeded {scale:.3g}"
                elif W is None and float(np.max(gradient_W(model, grid, u))) > config.guard_W:
                    bad = f"W exceeded {config.guard_W:.3g}"
            if bad is not None:
                trace.steps = steps
                raise FlowDiverged(f"flow diverged at t={t:.6g} after {steps} steps: {bad}",
                                   trace=trace, step=steps)
        trace.snapshots.append(_snapshot(model, grid, u, t))
    trace.steps = steps
    return trace


def evolve(model: WarpedModel, grid: RadialGrid, u0, config: FlowConfig) -> FlowTrace:
    """Evolve radial data ``u0`` (array on the grid or callable of r) to ``config.t_final``.

    The boundary value is held at ``u0(r0)``.  Raises FlowDiverged, carrying the partial
    trace, when the instability guard trips.
    """
    if not isinstance(grid, RadialGrid):
        raise ParameterError("evolve needs a RadialGrid; use evolve_polar for polar grids")
    return _evolve(model, grid, u0, config)


def evolve_polar(model: WarpedModel, grid: PolarGrid, u0, config: FlowConfig) -> FlowTrace:
    """Evolve data ``u0(r, theta)`` on a polar grid (n = 2 only)."""
    if not isinstance(grid, PolarGrid):
        raise ParameterError("evolve_polar needs a PolarGrid")
    if model.n != 2:
        raise ParameterError("polar evolution is only available for n = 2")
    return _evolve(model, grid, u0, config)


# -- exhaustion ----------------------------------------------------------------------


@dataclass
class ExhaustionReport:
    radii: list
    compact_radius: float
    T: float
    differences: list
    spacing: float

    @property
    def comparisons(self) -> int:
        return len(self.differences)

    @property
    def nonincreasing(self) -> bool:
        d = self.differences
        return all(b <= a for a, b in zip(d, d[1:]))

    @property
    def strictly_decreasing(self) -> bool:
        d = self.differences
        return all(b < a for a, b in zip(d, d[1:]))


def exhaustion_study(model: WarpedModel, u0: Callable, radii: Sequence[float], compact_radius: float,
                     T: float, config: FlowConfig, spacing: float = 0.02) -> ExhaustionReport:
    """Solve the Dirichlet problem with data u0 on each ball B_{R_k} and compare the
    solutions at time T on B_{compact_radius}.

    All balls use the same spacing so the compact set is sampled at common nodes.
    """
    radii = [float(R) for R in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ParameterError("radii must be increasing")
    if radii and not compact_radius < radii[0]:
        raise ParameterError("compact_radius must be smaller than every radius")
    cfg = replace(config, t_final=T, snapshot_every=max(T, 1e-12))
    restricted = []
    for R in radii:
        m = int(round(R / spacing)) + 1
        if abs((m - 1) * spacing - R) > 1e-9 * R:
            raise ParameterError(f"radius {R} is not a multiple of the spacing {spacing}")
        grid = RadialGrid(R, m)
        trace = evolve(model, grid, u0, cfg)
        k = int(round(compact_radius / grid.h)) + 1
        restricted.append(trace.final.u[:k])
    diffs = [float(np.max(np.abs(b - a))) for a, b in zip(restricted, restricted[1:])]
    return ExhaustionReport(radii, float(compact_radius), float(T), diffs, float(spacing))


# -- mollification -------------------------------------------------------------------


def mollify(u0: np.ndarray, width: float, grid: RadialGrid) -> np.ndarray:
    """Smooth radial nodal data with a compactly supported biweight kernel.

    The data are extended evenly across the pole and oddly about the boundary value,
    so the boundary value is preserved and constants are reproduced exactly.
    """
    u0 = np.asarray(u0, dtype=float)
    h = grid.h
    if width < 2 * h * (1 - 1e-12):
        raise ParameterError(f"mollifier width {width} is below twice the spacing {2 * h}")
    k = int(math.floor(width / h + 1e-12))
    if k > grid.m - 2:
        raise ParameterError("mollifier width exceeds the grid radius")
    x = np.arange(-k, k + 1) * h / width
    w = np.clip(1 - x ** 2, 0, None) ** 2
    w /= w.sum()
    m = grid.m
    left = u0[1:k + 1][::-1]
    right = 2 * u0[-1] - u0[-2:-k - 2:-1]
    ext = np.concatenate([left, u0, right])
    out = np.convolve(ext, w, mode="valid")
    out[-1] = u0[-1]
    return out[:m]
