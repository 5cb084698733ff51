import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kflow import barrier as B, model as M
from kflow.errors import FlowDiverged, ParameterError
from kflow.flow import (FlowConfig, GraphState, OutsideTheoremWarning, evolve, evolve_polar,
                        exhaustion_study, mollify, stable_dt, step)
from kflow.grids import PolarGrid, RadialGrid
from kflow.initial import ordered_pair, random_polar_data, random_radial_data

from conftest import BUILTINS


def _sigma(name):
    # admissible for each built-in (euclidean needs sigma < 0)
    return -0.1 if name == "euclidean" else 0.1


def test_config_validation():
    for bad in (dict(scheme="rk4"), dict(cfl=0.0), dict(cfl=1.5), dict(t_final=-1.0),
                dict(snapshot_every=0.0), dict(dt=-1e-3)):
        with pytest.raises(ParameterError):
            FlowConfig(**bad)


def test_zero_data_stays_zero():
    g = RadialGrid(1.0, 33)
    trace = evolve(M.euclidean(2), g, np.zeros(g.m), FlowConfig(t_final=0.2, snapshot_every=0.05))
    assert all(np.all(s.state.u == 0.0) for s in trace.snapshots)


@pytest.mark.parametrize("name", ["euclidean", "hyperbolic-product"])
def test_zero_minimal_slice_for_unit_warp(name):
    g = RadialGrid(1.0, 33)
    trace = evolve(M.builtin(name, 3), g, np.zeros(g.m), FlowConfig(t_final=0.05, snapshot_every=0.05))
    assert np.max(np.abs(trace.final.u)) == 0.0


def test_snapshot_times():
    g = RadialGrid(1.0, 33)
    cfg = FlowConfig(sigma=0.1, t_final=0.25, snapshot_every=0.1)
    trace = evolve(M.hyperbolic(2), g, random_radial_data(1, 1.0), cfg)
    np.testing.assert_allclose(trace.times, [0.0, 0.1, 0.2, 0.25], atol=1e-14)
    assert np.all(np.diff(trace.times) > 0)
    assert trace.times[-1] >= cfg.t_final - 1e-14
    assert trace.steps > 0
    # Dirichlet data are held
    for s in trace.snapshots:
        assert s.state.u[-1] == trace.snapshots[0].state.u[-1]


def test_zero_final_time():
    g = RadialGrid(1.0, 17)
    trace = evolve(M.euclidean(2), g, np.ones(g.m), FlowConfig(t_final=0.0))
    assert len(trace.snapshots) == 1 and trace.steps == 0


def test_initial_data_validation():
    g = RadialGrid(1.0, 17)
    with pytest.raises(ParameterError):
        evolve(M.euclidean(2), g, np.zeros(5), FlowConfig(t_final=0.01))
    u = np.zeros(g.m)
    u[3] = np.nan
    with pytest.raises(ParameterError):
        evolve(M.euclidean(2), g, u, FlowConfig(t_final=0.01))
    with pytest.raises(ParameterError):
        evolve(M.euclidean(2), PolarGrid(1.0, 17, 8), np.zeros((17, 8)), FlowConfig())
    with pytest.raises(ParameterError):
        evolve_polar(M.euclidean(3), PolarGrid(1.0, 17, 8), np.zeros((17, 8)), FlowConfig())


def test_step_keeps_boundary_and_advances_time():
    model = M.hyperbolic(2)
    g = RadialGrid(1.0, 33)
    u = random_radial_data(4, 1.0, offset=0.3)(g.nodes)
    new = step(model, g, GraphState(u, 0.5), FlowConfig(sigma=0.2))
    assert new.u[-1] == u[-1]
    assert new.t == pytest.approx(0.5 + 0.9 * stable_dt(model, g, GraphState(u)))


def _stationary_deviation(m, T=0.05):
    model = M.euclidean(2)
    g = RadialGrid(0.8, m)
    cap = B.cap_profile(model, 1.0, 64)
    u0 = cap.height(g.nodes)
    trace = evolve(model, g, u0, FlowConfig(sigma=cap.H_R, t_final=T, snapshot_every=T / 4))
    return max(float(np.max(np.abs(s.state.u - u0))) for s in trace.snapshots)


def test_stationary_cap_second_order():
    e1, e2 = _stationary_deviation(33), _stationary_deviation(65)
    assert e1 < 5e-3
    assert e1 / e2 > 3.0


def test_four_times_cfl_diverges():
    model = M.euclidean(2)
    g = RadialGrid(0.8, 65)
    u0 = B.cap_profile(model, 1.0, 64).height(g.nodes)
    dt = 4.0 * stable_dt(model, g, GraphState(u0))
    with pytest.raises(FlowDiverged) as info:
        evolve(model, g, u0, FlowConfig(sigma=-1.0, dt=dt, t_final=1.0, snapshot_every=0.5))
    assert info.value.step <= 100
    assert len(info.value.trace.snapshots) >= 1
    assert info.value.trace.snapshots[0].t == 0.0


def test_stable_step_does_not_trip_guard():
    model = M.euclidean(2)
    g = RadialGrid(0.8, 65)
    u0 = B.cap_profile(model, 1.0, 64).height(g.nodes)
    dt = stable_dt(model, g, GraphState(u0))
    trace = evolve(model, g, u0, FlowConfig(sigma=-1.0, dt=dt, t_final=300 * dt, snapshot_every=1.0))
    assert trace.steps == 300


def test_outside_theorem_warning():
    g = RadialGrid(1.0, 17)
    with pytest.warns(OutsideTheoremWarning):
        trace = evolve(M.euclidean(2), g, np.zeros(g.m), FlowConfig(sigma=0.5, t_final=0.01))
    assert trace.outside_theorem
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        trace = evolve(M.euclidean(2), g, np.zeros(g.m), FlowConfig(sigma=-0.1, t_final=0.01))
    assert not trace.outside_theorem


@given(st.integers(0, 1000), st.floats(-20, 20))
@settings(max_examples=10)
def test_translation_equivariance(seed, c):
    model = M.hyperbolic(2)
    g = RadialGrid(1.0, 25)
    u0 = random_radial_data(seed, 1.0)(g.nodes)
    cfg = FlowConfig(sigma=0.2, t_final=0.02, snapshot_every=0.02)
    a = evolve(model, g, u0, cfg)
    b = evolve(model, g, u0 + c, cfg)
    assert a.steps == b.steps
    assert np.max(np.abs(b.final.u - a.final.u - c)) <= 1e-12 * max(1.0, abs(c))


@pytest.mark.parametrize("name", BUILTINS)
def test_comparison_principle(name):
    model = M.builtin(name, 2)
    g = RadialGrid(1.0, 33)
    cfg = FlowConfig(sigma=_sigma(name), t_final=0.2, snapshot_every=0.05)
    for seed in (0, 1):
        lo, hi = ordered_pair(seed, 1.0)
        a, b = evolve(model, g, lo, cfg), evolve(model, g, hi, cfg)
        tol = 10 * (g.h ** 2 + cfg.snapshot_every)
        for sa, sb in zip(a.snapshots, b.snapshots):
            assert np.all(sa.state.u <= sb.state.u + tol)
            # the discrete scheme is monotone at this step size: no violation at all
            assert np.all(sa.state.u <= sb.state.u + 1e-12)


# -- semi-implicit ------------------------------------------------------------------------


@pytest.mark.parametrize("name", BUILTINS)
def test_semi_implicit_tracks_explicit(name):
    model = M.builtin(name, 2)
    g = RadialGrid(1.0, 33)
    u0 = random_radial_data(2, 1.0)
    cfg = FlowConfig(sigma=_sigma(name), t_final=0.1, snapshot_every=0.1)
    ex = evolve(model, g, u0, cfg)
    im = evolve(model, g, u0, FlowConfig(sigma=cfg.sigma, t_final=0.1, snapshot_every=0.1,
                                          scheme="semi-implicit"))
    assert im.steps < ex.steps / 5
    assert np.max(np.abs(im.final.u - ex.final.u)) < 5e-3
    fine = evolve(model, g, u0, FlowConfig(sigma=cfg.sigma, t_final=0.1, snapshot_every=0.1,
                                            scheme="semi-implicit", implicit_factor=5))
    assert np.max(np.abs(fine.final.u - ex.final.u)) < np.max(np.abs(im.final.u - ex.final.u))


def test_semi_implicit_stationary_cap():
    model = M.hyperbolic(2)
    g = RadialGrid(0.8, 65)
    cap = B.cap_profile(model, 1.0, 64)
    u0 = cap.height(g.nodes)
    trace = evolve(model, g, u0, FlowConfig(sigma=cap.H_R, scheme="semi-implicit", t_final=0.5,
                                            snapshot_every=0.5))
    assert np.max(np.abs(trace.final.u - u0)) < 1e-3


# -- polar --------------------------------------------------------------------------------


@pytest.mark.parametrize("name", BUILTINS)
@pytest.mark.parametrize("scheme", ["explicit", "semi-implicit"])
def test_polar_reduces_to_radial(name, scheme):
    model = M.builtin(name, 2)
    f = random_radial_data(7, 1.0)
    pg = PolarGrid(1.0, 25, 16)
    rg = pg.radial()
    dt = 0.5 * stable_dt(model, pg, GraphState(f(pg.mesh()[0])))
    cfg = FlowConfig(sigma=_sigma(name), t_final=40 * dt, snapshot_every=1.0, dt=dt, scheme=scheme)
    two = evolve_polar(model, pg, lambda r, th: f(r), cfg)
    one = evolve(model, rg, f, cfg)
    assert np.max(np.abs(two.final.u - one.final.u[:, None])) < 1e-6


def test_polar_rotation_equivariance():
    model = M.hyperbolic(2)
    pg = PolarGrid(1.0, 21, 16)
    f = random_polar_data(3, 1.0)
    shift = 5
    th0 = shift * pg.dtheta
    cfg = FlowConfig(sigma=0.1, t_final=0.02, snapshot_every=0.02)
    a = evolve_polar(model, pg, f, cfg)
    b = evolve_polar(model, pg, lambda r, th: f(r, th + th0), cfg)
    assert np.max(np.abs(np.roll(a.final.u, -shift, axis=1) - b.final.u)) < 1e-12


def test_polar_tilted_data_respects_envelope():
    from kflow.estimates import check_height_envelope

    model = M.euclidean(2)
    pg = PolarGrid(1.0, 21, 16)
    cfg = FlowConfig(sigma=-0.1, t_final=0.1, snapshot_every=0.05)
    trace = evolve_polar(model, pg, lambda r, th: 0.3 * r ** 2 * np.cos(th), cfg)
    report = check_height_envelope(trace, model, 1.0, -0.1, tol=1e-3)
    assert report.ok, report.violations


# -- exhaustion ---------------------------------------------------------------------------


def test_exhaustion_trivial_cases():
    e = M.euclidean(2)
    cfg = FlowConfig(sigma=-0.1)
    rep = exhaustion_study(e, lambda r: np.exp(-r ** 2), [2.0], 1.0, 0.05, cfg, spacing=0.05)
    assert rep.comparisons == 0 and rep.nonincreasing
    h = M.hyperbolic(2)
    rep = exhaustion_study(h, lambda r: 0 * r, [1.0, 2.0, 3.0], 0.5, 0.05, FlowConfig(), spacing=0.05)
    assert rep.comparisons == 2 and rep.differences == [0.0, 0.0]


def test_exhaustion_validation():
    e = M.euclidean(2)
    with pytest.raises(ParameterError):
        exhaustion_study(e, np.cos, [2.0, 1.0], 0.5, 0.1, FlowConfig())
    with pytest.raises(ParameterError):
        exhaustion_study(e, np.cos, [1.0, 2.0], 1.0, 0.1, FlowConfig())
    with pytest.raises(ParameterError):
        exhaustion_study(e, np.cos, [1.01, 2.0], 0.5, 0.1, FlowConfig(), spacing=0.02)


def test_exhaustion_stabilizes():
    rep = exhaustion_study(M.euclidean(2), lambda r: np.exp(-r ** 2), [2.0, 4.0, 8.0], 1.0, 0.5,
                           FlowConfig(sigma=-0.1), spacing=0.04)
    assert rep.comparisons == 2 and rep.strictly_decreasing
    assert rep.differences[-1] <= 1e-3


# -- mollify ------------------------------------------------------------------------------


def test_mollify_cone():
    g = RadialGrid(1.0, 401)
    u = np.abs(g.nodes - 0.5)
    out = mollify(u, 0.05, g)
    assert np.max(np.abs(out - u)) <= 0.05
    assert out[-1] == u[-1]


def test_mollify_smooth_second_order():
    g = RadialGrid(1.0, 801)
    u = np.cos(2 * g.nodes) + g.nodes ** 3
    e = [np.max(np.abs(mollify(u, w, g) - u)[:-1]) for w in (0.1, 0.05, 0.025)]
    assert e[0] / e[1] > 3.5 and e[1] / e[2] > 3.5


def test_mollify_constant_and_validation():
    g = RadialGrid(1.0, 101)
    c = np.full(g.m, 2.5)
    np.testing.assert_allclose(mollify(c, 2 * g.h, g), c, rtol=0, atol=1e-15)
    with pytest.raises(ParameterError):
        mollify(c, 1.5 * g.h, g)
    with pytest.raises(ParameterError):
        mollify(c, 2.0, g)


@given(st.integers(0, 1000), st.floats(0.02, 0.2))
def test_mollify_lipschitz_bound(seed, width):
    g = RadialGrid(1.0, 201)
    rng = np.random.default_rng(seed)
    # random piecewise-linear data with slopes in [-1, 1]
    slopes = rng.uniform(-1, 1, size=g.m - 1)
    u = np.concatenate([[0.0], np.cumsum(slopes * g.h)])
    out = mollify(u, width, g)
    assert np.max(np.abs(out - u)) <= width + 1e-12
    assert out[-1] == u[-1]
