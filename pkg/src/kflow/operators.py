"""Conservative finite-volume discretisation of the graph operators.

For a height function u over B_{r0}(o) the Killing graph has

    W   = sqrt(rho^-2 + |grad u|^2)
    n H = (1/rho) div(rho grad u / W)
    Q   = W (n H - n sigma)

Fluxes ``rho xi^(n-1) u_r / W`` live on cell faces, where W is evaluated from the
face difference of u.  Cell volumes are exact integrals of ``rho xi^(n-1)`` so
the discrete divergence telescopes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import PolarGrid, RadialGrid, geometry_for
from .model import WarpedModel


def _values(state) -> np.ndarray:
    return np.asarray(getattr(state, "u", state), dtype=float)


# -- radial -------------------------------------------------------------------------


@dataclass
class RadialFields:
    """Intermediate quantities of one operator evaluation on a radial grid."""

    g_node: np.ndarray
    W: np.ndarray
    F_face: np.ndarray
    cond: np.ndarray
    nH: np.ndarray


def radial_fields(model: WarpedModel, grid: RadialGrid, u: np.ndarray) -> RadialFields:
    geo = geometry_for(model, grid)
    h = grid.h
    g_face = np.diff(u) / h
    W_face = np.sqrt(geo.rho_face ** -2 + g_face ** 2)
    F_face = g_face / W_face
    flux = geo.w_face * F_face

    g_node = np.empty_like(u)
    g_node[0] = 0.0
    g_node[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    g_node[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
    W = np.sqrt(geo.rho ** -2 + g_node ** 2)

    nH = np.empty_like(u)
    nH[0] = flux[0] / geo.vol[0]
    nH[1:-1] = (flux[1:] - flux[:-1]) / geo.vol[1:-1]
    flux_b = model.weight(grid.r0) * g_node[-1] / W[-1]
    nH[-1] = (flux_b - flux[-1]) / geo.vol[-1]
    return RadialFields(g_node, W, F_face, geo.w_face / (h * W_face), nH)


# -- polar (n = 2) -------------------------------------------------------------------


@dataclass
class PolarFields:
    g_r: np.ndarray
    g_t: np.ndarray
    W: np.ndarray
    cond_r: np.ndarray   # (m_r-1, m_theta) radial face conductances
    cond_t: np.ndarray   # (m_r, m_theta) angular face conductances (face j+1/2), row 0 unused
    nH: np.ndarray


def polar_fields(model: WarpedModel, grid: PolarGrid, u: np.ndarray) -> PolarFields:
    geo = geometry_for(model, grid)
    h, dt = grid.h, grid.dtheta
    m_r, m_t = grid.shape
    u = u.copy()
    u[0, :] = u[0].mean()

    xi = geo.xi
    # nodal gradient components
    g_t = np.zeros_like(u)
    g_t[1:] = (np.roll(u[1:], -1, axis=1) - np.roll(u[1:], 1, axis=1)) / (2 * dt * xi[1:, None])
    g_r = np.zeros_like(u)
    g_r[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    g_r[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
    # pole: first Fourier mode of ring 1
    th = grid.theta
    d1 = (u[1] - u[0, 0]) / h
    gx = 2.0 / m_t * np.sum(d1 * np.cos(th))
    gy = 2.0 / m_t * np.sum(d1 * np.sin(th))
    g_r[0] = gx * np.cos(th) + gy * np.sin(th)
    g_t[0] = -gx * np.sin(th) + gy * np.cos(th)
    W = np.sqrt(geo.rho[:, None] ** -2 + g_r ** 2 + g_t ** 2)

    # radial faces
    gr_f = np.diff(u, axis=0) / h
    gt_f = 0.5 * (g_t[:-1] + g_t[1:])
    gt_f[0] = g_t[1]
    W_rf = np.sqrt(geo.rho_face[:, None] ** -2 + gr_f ** 2 + gt_f ** 2)
    cond_r = (geo.w_face[:, None] * dt) / (h * W_rf)
    flux_r = cond_r * np.diff(u, axis=0)

    # angular faces (i, j+1/2) for i >= 1
    cond_t = np.zeros_like(u)
    du_t = np.roll(u, -1, axis=1) - u
    gt_af = du_t[1:] / (xi[1:, None] * dt)
    gr_af = 0.5 * (g_r[1:] + np.roll(g_r[1:], -1, axis=1))
    W_af = np.sqrt(geo.rho[1:, None] ** -2 + gt_af ** 2 + gr_af ** 2)
    length = np.full(m_r - 1, h)
    length[-1] = 0.5 * h
    cond_t[1:] = geo.rho[1:, None] * length[:, None] / (xi[1:, None] * dt * W_af)
    flux_t = cond_t * du_t

    nH = np.empty_like(u)
    nH[0] = np.sum(flux_r[0]) / (geo.vol[0] * 2 * np.pi)
    net = np.zeros_like(u)
    net[1:-1] = flux_r[1:] - flux_r[:-1]
    net[1:] += flux_t[1:] - np.roll(flux_t[1:], 1, axis=1)
    nH[1:-1] = net[1:-1] / (geo.vol[1:-1, None] * dt)
    # boundary ring: one-sided outward flux
    flux_b = model.weight(grid.r0) * dt * g_r[-1] / W[-1]
    nH[-1] = (flux_b - flux_r[-1] + net[-1]) / (geo.vol[-1] * dt)
    return PolarFields(g_r, g_t, W, cond_r, cond_t, nH)


# -- public operators -----------------------------------------------------------------


def _fields(model, grid, state):
    u = _values(state)
    if isinstance(grid, PolarGrid):
        return polar_fields(model, grid, u)
    return radial_fields(model, grid, u)


def gradient_W(model: WarpedModel, grid, state) -> np.ndarray:
    """Nodal ``W = sqrt(rho^-2 + |grad u|^2)``; central differences inside, one-sided at the boundary."""
    return _fields(model, grid, state).W


def mean_curvature(model: WarpedModel, grid, state) -> np.ndarray:
    """Nodal values of ``n H`` for the normal ``(rho^-2 X - grad u)/W``."""
    return _fields(model, grid, state).nH


def q_operator(model: WarpedModel, grid, state, sigma: float) -> np.ndarray:
    f = _fields(model, grid, state)
    return f.W * (f.nH - model.n * sigma)


def divergence_balance(model: WarpedModel, grid: RadialGrid, state) -> tuple[float, float]:
    """Volume-weighted sum of ``n H`` over the non-boundary nodes and the flux through
    the face next to the boundary.  The two agree up to rounding."""
    u = _values(state)
    geo = geometry_for(model, grid)
    f = radial_fields(model, grid, u)
    total = float(np.sum(f.nH[:-1] * geo.vol[:-1]))
    return total, float(geo.w_face[-1] * f.F_face[-1])
