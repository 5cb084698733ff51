"""Uniform grids on geodesic balls B_{r0}(o) and their cached model geometry."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import WarpedModel

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)


@dataclass(frozen=True)
class RadialGrid:
    """Nodes ``r_i = i*h``, ``i = 0..m-1``; node 0 is the pole, node m-1 the boundary."""

    r0: float
    m: int

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError("grid radius r0 must be positive")
        if self.m < 16:
            raise ValueError("radial grid needs m >= 16 nodes")

    @property
    def h(self) -> float:
        return self.r0 / (self.m - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(self.m)

    @property
    def shape(self) -> tuple[int]:
        return (self.m,)

    def refined(self) -> "RadialGrid":
        """Grid with exactly half the spacing (nodes of ``self`` are kept)."""
        return RadialGrid(self.r0, 2 * (self.m - 1) + 1)


@dataclass(frozen=True)
class PolarGrid:
    """Tensor grid ``(r_i, theta_j)`` with periodic theta; row 0 is the pole."""

    r0: float
    m_r: int
    m_theta: int

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError("grid radius r0 must be positive")
        if self.m_r < 16:
            raise ValueError("polar grid needs m_r >= 16")
        if self.m_theta < 8 or self.m_theta % 2:
            raise ValueError("m_theta must be even and >= 8")

    @property
    def h(self) -> float:
        return self.r0 / (self.m_r - 1)

    @property
    def dtheta(self) -> float:
        return 2 * np.pi / self.m_theta

    @property
    def r(self) -> np.ndarray:
        return self.h * np.arange(self.m_r)

    @property
    def theta(self) -> np.ndarray:
        return self.dtheta * np.arange(self.m_theta)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m_r, self.m_theta)

    def mesh(self):
        return np.meshgrid(self.r, self.theta, indexing="ij")

    def radial(self) -> RadialGrid:
        return RadialGrid(self.r0, self.m_r)


def _cell_integral(model: WarpedModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gauss-Legendre integral of rho*xi^(n-1) over each [a_k, b_k]."""
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    pts = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    return half * (model.weight(pts) @ _GL_WEIGHTS)


@dataclass(frozen=True, eq=False)
class RadialGeometry:
    """Model quantities sampled on a radial grid (nodes and cell faces)."""

    r: np.ndarray
    r_face: np.ndarray
    rho: np.ndarray
    rho_face: np.ndarray
    dlogrho: np.ndarray
    xi: np.ndarray
    dxi: np.ndarray
    w_face: np.ndarray
    vol: np.ndarray


@lru_cache(maxsize=256)
def radial_geometry(model: WarpedModel, r0: float, m: int) -> RadialGeometry:
    h = r0 / (m - 1)
    r = h * np.arange(m)
    r_face = r[:-1] + 0.5 * h
    rho, drho, _ = model.rho(r)
    xi, dxi, _ = model.xi(r)
    rho_face = model.rho(r_face)[0]
    w_face = model.weight(r_face)
    lo = np.concatenate([[0.0], r_face])
    hi = np.concatenate([r_face, [r0]])
    vol = _cell_integral(model, lo, hi)
    for arr in (r, r_face, rho, rho_face, drho, xi, dxi, w_face, vol):
        arr.setflags(write=False)
    return RadialGeometry(r, r_face, rho, rho_face, drho / rho, xi, dxi, w_face, vol)


def geometry_for(model: WarpedModel, grid) -> RadialGeometry:
    if isinstance(grid, PolarGrid):
        if model.n != 2:
            raise ValueError("polar grids are only supported for n = 2")
        return radial_geometry(model, float(grid.r0), int(grid.m_r))
    return radial_geometry(model, float(grid.r0), int(grid.m))
