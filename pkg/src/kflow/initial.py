"""Seeded smooth initial data on geodesic balls."""
from __future__ import annotations

import numpy as np


def random_radial_data(seed: int, r0: float, terms: int = 6, amplitude: float = 0.5,
                       offset: float = 0.0):
    """Random smooth even profile with value ``offset`` on r = r0.

    ``u(r) = offset + sum_k a_k (cos(k pi r / r0) - (-1)^k) / k^2`` with normal a_k,
    rescaled so that ``sup |u - offset| = amplitude``.
    """
    rng = np.random.default_rng(seed)
    a = rng.normal(size=terms)
    k = np.arange(1, terms + 1)
    x = np.linspace(0.0, r0, 2049)
    base = ((np.cos(np.outer(x, k) * np.pi / r0) - (-1.0) ** k) / k ** 2) @ a
    scale = amplitude / max(float(np.max(np.abs(base))), 1e-300)

    def u(r):
        r = np.asarray(r, dtype=float)
        s = ((np.cos(r[..., None] * k * np.pi / r0) - (-1.0) ** k) / k ** 2) @ a
        return offset + scale * s

    return u


def random_polar_data(seed: int, r0: float, modes: int = 3, terms: int = 6,
                      amplitude: float = 0.5, offset: float = 0.0):
    """Radial random profile plus ``(r/r0)^j (1 - (r/r0)^2) cos(j theta + phase)`` terms.

    Every term is smooth at the pole and vanishes on r = r0.
    """
    radial = random_radial_data(seed, r0, terms, amplitude, offset)
    rng = np.random.default_rng([seed, 1])
    coef = 0.5 * amplitude * rng.normal(size=modes) / np.arange(1, modes + 1)
    phase = rng.uniform(0, 2 * np.pi, size=modes)

    def u(r, theta):
        r = np.asarray(r, dtype=float)
        x = r / r0
        out = radial(r) + 0.0 * np.asarray(theta)
        for j in range(1, modes + 1):
            out = out + coef[j - 1] * x ** j * (1 - x * x) * np.cos(j * np.asarray(theta) + phase[j - 1])
        return out

    return u


def ordered_pair(seed: int, r0: float, amplitude: float = 0.5):
    """Two radial data ``lo <= hi`` with equal boundary values (hi = lo + bump)."""
    lo = random_radial_data(seed, r0, amplitude=amplitude)
    rng = np.random.default_rng([seed, 2])
    height = rng.uniform(0.05, 0.5) * amplitude

    def hi(r):
        r = np.asarray(r, dtype=float)
        return lo(r) + height * np.cos(0.5 * np.pi * r / r0) ** 2

    return lo, hi
