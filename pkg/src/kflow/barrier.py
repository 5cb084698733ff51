"""Constant mean curvature caps and the expanding cap family used as height barriers.

For a ball of radius R in a model ``M x_rho R`` write

    A(R) = rho(R) xi(R)^(n-1),   V(R) = int_0^R A,   H(R) = -A(R) / (n V(R)).

The radial graph v_R over B_R(o) with v_R = 0 on the boundary has constant mean
curvature H(R) (with respect to the normal ``(rho^-2 X - grad v)/W``).  Its profile
is traced from the boundary circle, where it is vertical, towards the axis with the
arclength system

    r' = cos(phi),   rho s' = sin(phi),   phi' = -n H(R) - n H_cyl(r) sin(phi).

Letting R grow by dR/dt = -n (H(R) - sigma) turns the caps into a barrier family
``u_+(x, t) = v_{R(t)}(r(x))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.optimize import brentq

from .errors import DomainError, NumericalError, PreconditionError
from .model import WarpedModel, cylinder_mean_curvature

AXIS_FRACTION = 1e-3
_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
_HX, _HW = np.polynomial.legendre.leggauss(48)


def _A(model: WarpedModel, r):
    return model.weight(np.asarray(r, dtype=float))


def _V(model: WarpedModel, R: float) -> float:
    if R == 0:
        return 0.0
    value, err = integrate.quad(lambda s: float(_A(model, s)), 0.0, R,
                                epsabs=0.0, epsrel=1e-13, limit=200)
    if not math.isfinite(value) or err > 1e-9 * abs(value):
        raise NumericalError(f"volume quadrature failed at R={R} (residual estimate {err:.3e})",
                             residual=err)
    return value


def _dA(model: WarpedModel, r):
    """A'(r) = rho' xi^(n-1) + (n-1) rho xi^(n-2) xi', finite at the pole."""
    x, dx, _ = model.xi(np.asarray(r, dtype=float))
    p, dp, _ = model.rho(np.asarray(r, dtype=float))
    n = model.n
    return dp * x ** (n - 1) + (n - 1) * p * x ** (n - 2) * dx


def _gl_integral(model, a, b):
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return half * float(_A(model, mid + half * _GL_X) @ _GL_W)


def cap_data(model: WarpedModel, R: float) -> tuple[float, float, float]:
    """Return ``(A, V, H)`` for the ball of radius R."""
    if not R > 0:
        raise DomainError(f"cap radius must be positive, got {R}")
    A = float(_A(model, R))
    V = _V(model, R)
    return A, V, -A / (model.n * V)


def cap_mean_curvature(model: WarpedModel, R: float) -> float:
    return cap_data(model, R)[2]


# -- profile ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CapProfile:
    """Sampled CMC cap over B_R(o).

    ``phi`` is the angle between the profile tangent (oriented towards the axis) and
    the inward radial direction: pi/2 on the boundary circle, 0 on the axis.
    """

    R: float
    H_R: float
    r: np.ndarray
    v: np.ndarray
    v_prime: np.ndarray
    phi: np.ndarray
    model: WarpedModel = field(repr=False)
    _sol: object = field(repr=False, default=None)
    _s_end: float = field(repr=False, default=0.0)
    _r_eps: float = field(repr=False, default=0.0)
    _end_state: tuple = field(repr=False, default=())

    @property
    def nodes(self):
        return np.column_stack([self.r, self.v, self.v_prime, self.phi])

    @property
    def center_height(self) -> float:
        return float(self.v[0])

    def _locate(self, r: np.ndarray) -> np.ndarray:
        """Arclength parameters at which the profile reaches the radii ``r``."""
        lo = np.zeros_like(r)
        hi = np.full_like(r, self._s_end)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            above = self._sol(mid)[0] > r
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return 0.5 * (lo + hi)

    def evaluate(self, r) -> tuple[np.ndarray, np.ndarray]:
        """Height and slope of the cap at radii ``0 <= r <= R``.

        Both come from fixed-node quadratures of the closed-form slope, so they are
        analytic in r (no step-to-step interpolation noise under finite differences).
        """
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if np.any(r < 0) or np.any(r > self.R * (1 + 1e-12)):
            raise DomainError(f"cap over B_{self.R} evaluated outside its domain")
        r = np.minimum(r, self.R)
        return _cap_values(self.model, self.R, r)

    def trace_evaluate(self, r) -> tuple[np.ndarray, np.ndarray]:
        """Height and slope read off the arclength integration (independent route)."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        r = np.minimum(r, self.R)
        v = np.empty_like(r)
        dv = np.empty_like(r)
        inner = r < self._r_eps
        outer = ~inner
        if outer.any():
            s = self._locate(r[outer])
            rr, ss, ph = self._sol(s)
            v[outer] = ss
            rho = self.model.rho(rr)[0]
            with np.errstate(divide="ignore"):
                dv[outer] = np.where(np.cos(ph) < 0, np.sin(ph) / (rho * np.cos(ph)), -np.inf)
        if inner.any():
            v_e, dv_e = self._end_state
            x = r[inner]
            v[inner] = v_e + 0.5 * dv_e / self._r_eps * (x ** 2 - self._r_eps ** 2)
            dv[inner] = dv_e * x / self._r_eps
        return v, dv

    def height(self, r):
        return self.evaluate(r)[0]


def _slope_terms(model: WarpedModel, R: float, length: np.ndarray):
    """``(nH V(s), rho(s), sqrt(A(s)^2 - n^2 H^2 V(s)^2))`` at ``s = R - length``.

    Taking the distance to the boundary as input keeps it exact for s near R.
    """
    A_R, V_R, _ = cap_data(model, R)
    length = np.asarray(length, dtype=float)
    s = R - length
    A = model.weight(s)
    rho = model.rho(s)[0]
    # near the boundary integrate over [s, R]; near the pole over [0, s] (no cancellation)
    near = length <= 0.5 * R
    span = np.where(near, length, s)
    half = 0.5 * span
    t = np.where(near, R - half, half)[..., None] + half[..., None] * _HX
    A_t = model.weight(t)
    I = half * (A_t @ _HW)
    V = np.where(near, V_R - I, I)
    # A^2 - (A_R V / V_R)^2 = (A V_R - A_R V)(A V_R + A_R V) / V_R^2 and near R
    # A V_R - A_R V = int_s^R (A_R A - V_R A'), whose integrand is positive there
    G_near = half * ((A_R * A_t - V_R * _dA(model, t)) @ _HW)
    G = np.where(near, G_near, A * V_R - A_R * V)
    gap = G * (A * V_R + A_R * V) / V_R ** 2
    return -A_R * V / V_R, rho, np.sqrt(np.maximum(gap, 0.0))


def _cap_values(model: WarpedModel, R: float, r: np.ndarray):
    A_R, V_R, _ = cap_data(model, R)
    r = np.asarray(r, dtype=float)
    # slope v' = nH V / (rho sqrt(A^2 - n^2 H^2 V^2)), odd at the pole, -inf on r = R
    flux, rho, root = _slope_terms(model, R, R - r)
    with np.errstate(divide="ignore", invalid="ignore"):
        dv = np.where(r >= R, -np.inf, np.where(r > 0, flux / (rho * root), 0.0))
    # height -int_0^{sqrt(R-r)} 2 w v'(R - w^2) dw; the integrand is analytic in w
    top = np.sqrt(np.maximum(R - r, 0.0))
    w = 0.5 * top[..., None] * (_HX + 1.0)
    flux_w, rho_w, root_w = _slope_terms(model, R, w * w)
    # root ~ w sqrt(2 V_R (A_R^2/V_R - A'(R))) near w = 0, so 2 w / root stays bounded
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = 2.0 * flux_w / rho_w * (w / root_w)
        v = np.where(top > 0, -0.5 * top * (integrand @ _HW), 0.0)
    return v, dv


def _cap_rhs(model: WarpedModel, nH: float):
    n = model.n

    def rhs(_s, y):
        r, _, phi = y
        x, dx, _ = model.xi(r)
        p, dp, _ = model.rho(r)
        sin_phi = math.sin(phi)
        return [math.cos(phi), sin_phi / float(p),
                -nH - ((n - 1) * float(dx / x) + float(dp / p)) * sin_phi]

    return rhs


@lru_cache(maxsize=512)
def _trace_cap(model: WarpedModel, R: float, axis_fraction: float):
    _, _, H = cap_data(model, R)
    nH = model.n * H
    r_eps = axis_fraction * R

    def reach_axis(_s, y):
        return y[0] - r_eps

    reach_axis.terminal = True
    reach_axis.direction = -1

    def turned_back(_s, y):
        # cos(phi) > 0 once the profile has left the boundary: not a graph
        return y[2] - 0.5 * math.pi + 1e-9

    turned_back.terminal = True
    turned_back.direction = -1

    s_max = 4.0 * R
    while True:
        sol = integrate.solve_ivp(
            _cap_rhs(model, nH), (0.0, s_max), [R, 0.0, 0.5 * math.pi],
            method="DOP853", rtol=1e-12, atol=1e-14, dense_output=True,
            events=(reach_axis, turned_back),
        )
        if sol.status == -1:
            raise NumericalError(f"cap profile integration failed: {sol.message}",
                                 last_valid=float(sol.y[0, -1]))
        if sol.t_events[1].size:
            raise NumericalError("cap profile turned back before reaching the axis",
                                 last_valid=float(sol.y[0, -1]))
        if sol.t_events[0].size:
            break
        if s_max > 1e6 * R:
            raise NumericalError("cap profile never reached the axis",
                                 last_valid=float(sol.y[0, -1]))
        s_max *= 4.0
    s_end = float(sol.t_events[0][0])
    r_e, v_e, ph_e = sol.y_events[0][0]
    dv_e = math.sin(ph_e) / (float(model.rho(np.asarray(r_e))[0]) * math.cos(ph_e))
    return H, sol.sol, s_end, r_eps, (float(v_e), float(dv_e))


def cap_profile(model: WarpedModel, R: float, resolution: int = 256,
                axis_fraction: float = AXIS_FRACTION) -> CapProfile:
    """Integrate the cap profile and sample it at ``resolution + 1`` equispaced radii.

    Below ``axis_fraction * R`` the profile is completed by the even quadratic that
    matches height and slope there.  ``v_prime`` is ``-inf`` at r = R.
    """
    if not R > 0:
        raise DomainError(f"cap radius must be positive, got {R}")
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    H, sol, s_end, r_eps, end_state = _trace_cap(model, float(R), float(axis_fraction))
    proto = CapProfile(R=float(R), H_R=H, r=np.empty(0), v=np.empty(0), v_prime=np.empty(0),
                       phi=np.empty(0), model=model, _sol=sol, _s_end=s_end, _r_eps=r_eps,
                       _end_state=end_state)
    r = R * np.arange(resolution + 1) / resolution
    v, dv = proto.evaluate(r)
    v[-1] = 0.0
    dv[-1] = -np.inf
    p = model.rho(r)[0]
    with np.errstate(invalid="ignore"):
        slope = np.where(np.isinf(dv), 1.0, -dv / np.sqrt(p ** -2 + dv ** 2))
    phi = np.arcsin(np.clip(slope, -1.0, 1.0))
    return CapProfile(R=float(R), H_R=H, r=r, v=v, v_prime=dv, phi=phi, model=model,
                      _sol=sol, _s_end=s_end, _r_eps=r_eps, _end_state=end_state)


@lru_cache(maxsize=4096)
def cap_center_height(model: WarpedModel, R: float) -> float:
    """Height v_R(o) of the cap at the pole."""
    _trace_cap(model, float(R), AXIS_FRACTION)      # raises unless the cap is a graph
    return float(_cap_values(model, float(R), np.zeros(1))[0][0])


def cap_slope_quadrature(model: WarpedModel, R: float, r) -> np.ndarray:
    """Closed-form slope ``v_R'(r) = nH V / (rho sqrt(A^2 - n^2 H^2 V^2))`` with V by quadrature."""
    _, VR, H = cap_data(model, R)
    nH = model.n * H
    out = []
    for x in np.atleast_1d(np.asarray(r, dtype=float)):
        if x <= 0:
            out.append(0.0)
            continue
        V = _V(model, x)
        A = float(_A(model, x))
        rho = float(model.rho(np.asarray(x))[0])
        out.append(nH * V / (rho * math.sqrt(A * A - nH * nH * V * V)))
    return np.array(out)


def cap_height_quadrature(model: WarpedModel, R: float, r: float) -> float:
    """Height v_R(r) by integrating the closed-form slope from the boundary.

    The slope has an inverse square root singularity at r = R; the substitution
    ``x = R - w^2`` makes the integrand bounded.
    """
    A_R, V_R, H = cap_data(model, R)
    n = model.n

    def integrand(w):
        if w == 0.0:
            # limit of 2 w v'(R - w^2)
            rho = float(model.rho(np.asarray(R))[0])
            x, dx, _ = model.xi(np.asarray(R))
            dA = float(_A(model, R)) * ((n - 1) * float(dx / x) + float(model.rho(np.asarray(R))[1]) / rho)
            return -2.0 * V_R / (rho * math.sqrt(2.0 * V_R * (A_R * A_R / V_R - dA)))
        x = R - w * w
        A = float(_A(model, x))
        rho = float(model.rho(np.asarray(x))[0])
        # A^2 - (A_R V / V_R)^2 = (A V_R - A_R V)(A V_R + A_R V) / V_R^2
        if w * w <= 0.5 * R:
            half = 0.5 * w * w
            t = (R - half) + half * _GL_X
            V = V_R - half * float(_A(model, t) @ _GL_W)
            G = half * float((A_R * _A(model, t) - V_R * _dA(model, t)) @ _GL_W)
        else:
            V = _V(model, x)
            G = A * V_R - A_R * V
        gap = G * (A * V_R + A_R * V) / V_R ** 2
        return 2.0 * w * (n * H * V) / (rho * math.sqrt(gap))

    value, _ = integrate.quad(integrand, 0.0, math.sqrt(R - r), epsabs=1e-13, epsrel=1e-12, limit=200)
    return -value


def radial_cmc_residual(profile: CapProfile) -> np.ndarray:
    """Residual of the radial CMC equation at the profile nodes (4th-order differences).

    Uses ``q = v'/W``, which is smooth up to r = R; the two nodes at each end are NaN.
    """
    model = profile.model
    n = model.n
    r = profile.r
    h = r[1] - r[0]
    p, dp, _ = model.rho(r)
    x, dx, _ = model.xi(r)
    with np.errstate(invalid="ignore"):
        q = np.where(np.isinf(profile.v_prime), -1.0,
                     profile.v_prime / np.sqrt(p ** -2 + profile.v_prime ** 2))
    res = np.full_like(r, np.nan)
    dq = (-q[4:] + 8 * q[3:-1] - 8 * q[1:-3] + q[:-4]) / (12 * h)
    inner = slice(2, -2)
    res[inner] = dq + q[inner] * (dp[inner] / p[inner] + (n - 1) * dx[inner] / x[inner]) - n * profile.H_R
    return res


# -- barrier radius ----------------------------------------------------------------------


def stall_radius(model: WarpedModel, r0: float, sigma: float, r_cap: float = 1e3) -> Optional[float]:
    """Radius R* > r0 with H(R*) = sigma, if one exists below ``r_cap``."""
    H0 = cap_mean_curvature(model, r0)
    if H0 >= sigma:
        return r0 if H0 == sigma else None
    lo, hi = r0, 2.0 * r0
    while True:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                Hhi = cap_mean_curvature(model, hi)
        except (NumericalError, OverflowError, FloatingPointError, ZeroDivisionError):
            return None
        if not math.isfinite(Hhi):
            return None
        if Hhi >= sigma:
            break
        lo, hi = hi, 2.0 * hi
        if hi > r_cap * max(1.0, r0):
            return None
    return brentq(lambda R: cap_mean_curvature(model, R) - sigma, lo, hi, xtol=1e-15, rtol=1e-15)


def _check_sigma(model, r0, sigma):
    H0 = cap_mean_curvature(model, r0)
    if sigma < H0 and not math.isclose(sigma, H0, rel_tol=1e-12, abs_tol=1e-14):
        raise PreconditionError(
            f"sigma={sigma} is below H(r0)={H0:.12g}: the barrier would shrink"
        )
    return H0


def radius_history(model: WarpedModel, r0: float, sigma: float, times) -> np.ndarray:
    """Barrier radius R(t) at the requested (non-negative) times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise DomainError("times must be non-negative")
    if not r0 > 0:
        raise DomainError("r0 must be positive")
    H0 = _check_sigma(model, r0, sigma)
    t_max = float(times.max()) if times.size else 0.0
    if t_max == 0.0 or math.isclose(sigma, H0, rel_tol=1e-12, abs_tol=1e-14):
        return np.full_like(times, r0)

    n = model.n
    R_star = stall_radius(model, r0, sigma)
    if R_star is None:
        # state (R, V); dR/dt = A/V + n sigma
        def rhs(_t, y):
            R, V = y
            A = float(_A(model, R))
            rate = A / V + n * sigma
            return [rate, A * rate]

        sol = integrate.solve_ivp(rhs, (0.0, t_max), [r0, _V(model, r0)], method="DOP853",
                                  rtol=1e-12, atol=1e-14, dense_output=True)
        if sol.status != 0:
            raise NumericalError(f"barrier radius integration failed: {sol.message}")
        return sol.sol(times)[0]

    # Near the stall the rate A/V + n sigma is a difference of nearly equal numbers, so
    # integrate the log of the gap R* - R and form the rate from differences at R*.
    A_s = float(_A(model, R_star))
    V_s = _V(model, R_star)

    n = model.n

    def mean_defect(g):
        # A* A(s) - V* A'(s) averaged over [R* - g, R*]; the rate is g times this over V V*
        s = R_star - 0.5 * g + 0.5 * g * _GL_X
        x, dx, _ = model.xi(s)
        p, dp, _ = model.rho(s)
        A = p * x ** (n - 1)
        dA = A * ((n - 1) * dx / x + dp / p)
        return 0.5 * float((A_s * A - V_s * dA) @ _GL_W)

    def rhs(_t, y):
        g = math.exp(y[0])
        V = V_s - _gl_integral(model, R_star - g, R_star)
        return [-mean_defect(g) / (V * V_s)]

    # the linearised decay rate bounds the step so the gap never overshoots
    slope = abs(mean_defect(1e-6 * R_star)) / V_s ** 2
    sol = integrate.solve_ivp(rhs, (0.0, t_max), [math.log(R_star - r0)], method="DOP853",
                              rtol=1e-12, atol=1e-12, dense_output=True,
                              max_step=max(0.5 / max(slope, 1e-12), 1e-6))
    if sol.status != 0:
        raise NumericalError(f"barrier radius integration failed: {sol.message}")
    R = R_star - np.exp(sol.sol(times)[0])
    R[times == 0.0] = r0  # the log round trip is not exact at t = 0
    return np.minimum(R, np.nextafter(R_star, -np.inf))


def barrier_radius(model: WarpedModel, r0: float, sigma: float, t: float) -> float:
    """Radius R(t) = r0 + mu(t) of the expanding cap, dmu/dt = -n (H(r0 + mu) - sigma)."""
    return float(radius_history(model, r0, sigma, [t])[0])


def implicit_time(model: WarpedModel, r0: float, R: float) -> float:
    """``int_{r0}^{R} V/A``: the time at which the sigma = 0 barrier reaches radius R."""
    value, _ = integrate.quad(lambda s: _V(model, s) / float(_A(model, s)), r0, R,
                              epsabs=1e-14, epsrel=1e-13, limit=200)
    return value


@dataclass(frozen=True, eq=False)
class BarrierFamily:
    r0: float
    sigma: float
    times: np.ndarray
    radii: np.ndarray
    caps: tuple
    stall_radius: Optional[float]
    model: WarpedModel = field(repr=False, default=None)

    def heights(self, r) -> np.ndarray:
        """``u_+(r, t_k)`` for every family time; shape (len(times), len(r))."""
        return np.array([cap.height(r) for cap in self.caps])


def barrier_family(model: WarpedModel, r0: float, sigma: float, times,
                   resolution: int = 64) -> BarrierFamily:
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("family times must be strictly increasing")
    radii = radius_history(model, r0, sigma, times)
    caps = tuple(cap_profile(model, float(R), resolution) for R in radii)
    return BarrierFamily(r0=float(r0), sigma=float(sigma), times=times, radii=radii, caps=caps,
                         stall_radius=stall_radius(model, r0, sigma), model=model)


def barrier_envelope(model: WarpedModel, r0: float, sigma: float, T: float,
                     u0_sup: float, u0_inf: float, r) -> tuple[np.ndarray, np.ndarray]:
    """Height bounds at time T for a Dirichlet solution on B_{r0}(o):

        lower = u0_inf - v_{R(T)}(o) + v_{r0}(r)
        upper = u0_sup + v_{R(T)}(o) - v_{r0}(r)
    """
    lower, upper = envelope_series(model, r0, sigma, [T], u0_sup, u0_inf, r)
    return lower[0], upper[0]


def envelope_series(model: WarpedModel, r0: float, sigma: float, times,
                    u0_sup: float, u0_inf: float, r) -> tuple[np.ndarray, np.ndarray]:
    """``barrier_envelope`` for many times at once; arrays of shape (len(times), len(r))."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r > r0 * (1 + 1e-12)):
        raise DomainError("envelope radius outside B_r0")
    radii = radius_history(model, r0, sigma, times)
    top = np.array([cap_center_height(model, float(R)) for R in radii])
    base = cap_profile(model, r0, 64).height(np.minimum(r, r0))
    upper = u0_sup + top[:, None] - base[None, :]
    lower = u0_inf - top[:, None] + base[None, :]
    return lower, upper


def supersolution_residual(model: WarpedModel, family: BarrierFamily, grid) -> np.ndarray:
    """``d/dt u_+ + Q[u_+]`` on the radial grid at each family time.

    The time derivative uses second-order differences over ``family.times``; the
    boundary node is NaN.
    """
    from .operators import q_operator

    r = grid.nodes
    u = family.heights(r)
    if len(family.times) >= 3:
        dudt = np.gradient(u, family.times, axis=0, edge_order=2)
    else:
        dudt = np.gradient(u, family.times, axis=0)
    res = np.array([dudt[k] + q_operator(model, grid, u[k], family.sigma)
                    for k in range(len(family.times))])
    res[:, -1] = np.nan
    return res
