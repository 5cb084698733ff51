"""Rotationally symmetric warped products M x_rho R.

A model is described by two radial profiles: ``xi`` (the metric of the base is
``dr^2 + xi(r)^2 dtheta^2``) and the warping ``rho`` (the norm of the Killing
field).  Each profile is a vectorised callable returning the value and its
first two radial derivatives.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import DomainError, NumericalError

Profile = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]

BUILTIN_MODELS = ("euclidean", "hyperbolic", "hyperbolic-product")


def _identity(r):
    r = np.asarray(r, dtype=float)
    return r, np.ones_like(r), np.zeros_like(r)


def _unit(r):
    r = np.asarray(r, dtype=float)
    return np.ones_like(r), np.zeros_like(r), np.zeros_like(r)


def _sinh(r):
    r = np.asarray(r, dtype=float)
    return np.sinh(r), np.cosh(r), np.sinh(r)


def _cosh(r):
    r = np.asarray(r, dtype=float)
    return np.cosh(r), np.sinh(r), np.cosh(r)


@dataclass(frozen=True, eq=False)
class WarpedModel:
    """Geometry of ``M x_rho R`` over a rotationally symmetric base with a pole."""

    n: int
    xi: Profile
    rho: Profile
    ricci_lower_bound: float
    name: str = "custom"
    xi_expr: Optional[str] = field(default=None, repr=False)
    rho_expr: Optional[str] = field(default=None, repr=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"dimension n must be an integer >= 2, got {self.n}")
        if not self.ricci_lower_bound >= 0:
            raise ValueError("ricci_lower_bound must be >= 0")

    # The helpers below are the hot path of the flow solver; keep them lean.
    def xi_values(self, r):
        return self.xi(np.asarray(r, dtype=float))

    def rho_values(self, r):
        return self.rho(np.asarray(r, dtype=float))

    def weight(self, r):
        """Radial volume density ``rho * xi^(n-1)`` (the function A)."""
        x = self.xi(np.asarray(r, dtype=float))[0]
        p = self.rho(np.asarray(r, dtype=float))[0]
        return p * x ** (self.n - 1)


def euclidean(n: int = 2) -> WarpedModel:
    return WarpedModel(n=n, xi=_identity, rho=_unit, ricci_lower_bound=0.0, name="euclidean")


def hyperbolic(n: int = 2) -> WarpedModel:
    return WarpedModel(n=n, xi=_sinh, rho=_cosh, ricci_lower_bound=float(n), name="hyperbolic")


def hyperbolic_product(n: int = 2) -> WarpedModel:
    return WarpedModel(
        n=n, xi=_sinh, rho=_unit, ricci_lower_bound=float(n - 1), name="hyperbolic-product"
    )


def builtin(name: str, n: int = 2) -> WarpedModel:
    factories = {
        "euclidean": euclidean,
        "hyperbolic": hyperbolic,
        "hyperbolic-product": hyperbolic_product,
    }
    try:
        return factories[name](n)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose one of {BUILTIN_MODELS}") from None


# -- user expressions ---------------------------------------------------------

_ALLOWED_NAMES = {"r", "sin", "cos", "tan", "sinh", "cosh", "tanh", "exp", "log", "sqrt", "pi", "E"}
_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(\*\*|[-+*/^()]))")


def _check_grammar(expr: str) -> None:
    pos = 0
    expr = expr.strip()
    if not expr:
        raise ValueError("empty expression")
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if m is None or m.end() == pos:
            raise ValueError(f"unexpected character in expression {expr!r} at {pos}")
        name = m.group(2)
        if name is not None and name not in _ALLOWED_NAMES:
            raise ValueError(f"unknown identifier {name!r} in expression {expr!r}")
        pos = m.end()


def compile_profile(expr: str) -> Profile:
    """Compile an arithmetic expression in ``r`` into a profile triple.

    The grammar is numbers, ``r``, ``pi``, ``E``, the operators ``+ - * / ^ **``,
    parentheses and the functions sin, cos, tan, sinh, cosh, tanh, exp, log, sqrt.
    """
    import sympy

    _check_grammar(expr)
    r = sympy.Symbol("r", real=True)
    local = {name: getattr(sympy, name) for name in _ALLOWED_NAMES - {"r", "pi", "E"}}
    local.update(r=r, pi=sympy.pi, E=sympy.E)
    parsed = sympy.sympify(expr.replace("^", "**"), locals=local)
    derivs = [parsed, sympy.diff(parsed, r), sympy.diff(parsed, r, 2)]
    funcs = [sympy.lambdify(r, d, modules="numpy") for d in derivs]

    def profile(x):
        x = np.asarray(x, dtype=float)
        return tuple(np.broadcast_to(np.asarray(f(x), dtype=float), x.shape).copy() for f in funcs)

    return profile


def custom(n: int, xi_expr: str, rho_expr: str, ricci_lower_bound: float) -> WarpedModel:
    return WarpedModel(
        n=n,
        xi=compile_profile(xi_expr),
        rho=compile_profile(rho_expr),
        ricci_lower_bound=float(ricci_lower_bound),
        name="custom",
        xi_expr=xi_expr,
        rho_expr=rho_expr,
    )


# -- operations -----------------------------------------------------------------


def evaluate_profiles(model: WarpedModel, r):
    """Return ``(xi, xi', rho, rho', rho'')`` at radius ``r``."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0) or not np.all(np.isfinite(r_arr)):
        raise DomainError(f"radius must be finite and non-negative, got {r}")
    x, dx, _ = model.xi(r_arr)
    p, dp, ddp = model.rho(r_arr)
    out = (x, dx, p, dp, ddp)
    if r_arr.ndim == 0:
        return tuple(float(v) for v in out)
    return out


def zeta_bar(model: WarpedModel, r: float) -> float:
    """Primitive of ``xi`` vanishing at the pole."""
    if r < 0:
        raise DomainError(f"radius must be non-negative, got {r}")
    if r == 0:
        return 0.0
    value, err = integrate.quad(lambda s: float(model.xi(np.asarray(s))[0]), 0.0, r,
                                epsabs=1e-13, epsrel=1e-13, limit=200)
    if not math.isfinite(value) or err > 1e-9 * max(1.0, abs(value)):
        raise NumericalError(f"zeta_bar quadrature did not converge (residual estimate {err:.3e})")
    return value


def cylinder_mean_curvature(model: WarpedModel, r):
    """Mean curvature of the Killing cylinder over the geodesic sphere of radius r."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0):
        raise DomainError("the Killing cylinder degenerates at the pole; need r > 0")
    x, dx, _ = model.xi(r_arr)
    p, dp, _ = model.rho(r_arr)
    h = ((model.n - 1) * dx / x + dp / p) / model.n
    return float(h) if r_arr.ndim == 0 else h


@dataclass(frozen=True)
class SigmaBound:
    """Sampled infimum of the admissibility function on ``(0, r_max]``."""

    value: float
    r_max: float
    samples: int
    argmin: float
    tail_decreasing: bool

    def __float__(self):
        return self.value


def _admissibility(model: WarpedModel, r):
    x, dx, _ = model.xi(r)
    p, dp, _ = model.rho(r)
    return (np.abs(dp) / p + (model.n - 1) * dx / x) / model.n


def sigma_supremum(model: WarpedModel, r_max: float, samples: int = 2000) -> SigmaBound:
    """Approximate the upper bound on admissible sigma by sampling ``(0, r_max]``.

    ``tail_decreasing`` is set when the sampled function is still decreasing at
    ``r_max``; the true infimum over M may then be smaller than ``value``.
    """
    if r_max <= 0:
        raise DomainError("r_max must be positive")
    if samples < 2:
        raise ValueError("need at least 2 samples")
    r = r_max * np.arange(1, samples + 1) / samples
    f = _admissibility(model, r)
    k = int(np.argmin(f))
    tail = bool(f[-1] < f[-2] - 1e-15 * abs(f[-2]))
    return SigmaBound(float(f[k]), float(r_max), int(samples), float(r[k]), tail)


@dataclass
class ModelReport:
    cond3_margin: float
    sigma_sup: SigmaBound
    violations: list = field(default_factory=list)
    cond3_onset: Optional[float] = None

    @property
    def ok(self) -> bool:
        return not self.violations


def check_conditions(model: WarpedModel, r_max: float, samples: int = 2000,
                     fd_step: float = 1e-6) -> ModelReport:
    """Check the pole conditions on xi and the warping bound |rho'/rho| <= xi'/xi.

    Violations are returned as ``(radius, condition id)`` pairs.  The lower bound
    on sectional curvatures holds with equality for model manifolds and is not
    checked here.
    """
    if r_max <= 0:
        raise DomainError("r_max must be positive")
    violations: list[tuple[float, str]] = []

    x0 = float(model.xi(np.asarray(0.0))[0])
    x1 = float(model.xi(np.asarray(fd_step))[0])
    x2 = float(model.xi(np.asarray(2 * fd_step))[0])
    slope0 = (-3 * x0 + 4 * x1 - x2) / (2 * fd_step)
    if abs(x0) > 1e-12:
        violations.append((0.0, "cond-2:xi(0)=0"))
    if abs(slope0 - 1.0) > 1e-6:
        violations.append((0.0, "cond-2:xi'(0)=1"))

    r = r_max * np.arange(1, samples + 1) / samples
    x, dx, _ = model.xi(r)
    p, dp, _ = model.rho(r)
    if np.any(x <= 0):
        violations.extend((float(ri), "cond-2:xi>0") for ri in r[x <= 0])
    if np.any(p <= 0) or float(model.rho(np.asarray(0.0))[0]) <= 0:
        violations.extend((float(ri), "rho>0") for ri in r[p <= 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        margin = dx / x - np.abs(dp / p)
    bad = ~(margin >= 0)
    violations.extend((float(ri), "cond-3") for ri in r[bad])

    onset = None
    if bad.any():
        k = int(np.argmax(bad))
        if k > 0:
            from scipy.optimize import brentq

            def g(s):
                xs, dxs, _ = model.xi(np.asarray(s))
                ps, dps, _ = model.rho(np.asarray(s))
                return float(dxs / xs - abs(dps / ps))

            onset = brentq(g, r[k - 1], r[k], xtol=1e-14)
        else:
            onset = float(r[0])
    return ModelReport(
        cond3_margin=float(np.nanmin(margin)),
        sigma_sup=sigma_supremum(model, r_max, samples),
        violations=violations,
        cond3_onset=onset,
    )
