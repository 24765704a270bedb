import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optiks.geometry import (GAMMA_BAR_1H, ArcCurve, GeometryError, HardwareLimits, ParamCurve,
                             RosetteParams, SpiralParams, CepiParams, arclength_reparam,
                             default_arc_samples, gen_trajectory, speed_limit, trapezoid_length)

HW = HardwareLimits(0.1, 195.0)


def circle(rho=100.0, m=20001, turns=1.0):
    th = np.linspace(0, 2 * np.pi * turns, m)
    return ParamCurve(np.c_[rho * np.cos(th), rho * np.sin(th)], th)


# --- containers -------------------------------------------------------------

def test_hardware_defaults_and_validation():
    hw = HardwareLimits(0.1, 195.0)
    assert hw.gamma_bar == GAMMA_BAR_1H and hw.dt == 4e-6
    with pytest.raises(GeometryError):
        HardwareLimits(0.0, 195.0)
    with pytest.raises(GeometryError):
        HardwareLimits(0.1, 195.0, dt=-1.0)


def test_paramcurve_validation():
    p = np.linspace(0, 1, 5)
    with pytest.raises(GeometryError, match="non-monotonic-params"):
        ParamCurve(np.c_[p, p], p[::-1])
    with pytest.raises(GeometryError):
        ParamCurve(np.c_[p[:3], p[:3]], p[:3])
    bad = np.c_[p, p]
    bad[2, 0] = np.nan
    with pytest.raises(GeometryError):
        ParamCurve(bad, p)
    with pytest.raises(GeometryError):
        ParamCurve(np.zeros((5, 4)), p)


# --- generators -------------------------------------------------------------

def test_spiral_vd_kmax_500():
    c = gen_trajectory("spiral", SpiralParams(fov=0.22, res=0.001, interleaves=4, r_center=1, r_edge=2))
    assert np.allclose(c.points[0], 0.0)
    assert c.k_max == pytest.approx(500.0, rel=1e-6)


def test_spiral_user_density():
    c = gen_trajectory("spiral", SpiralParams(fov=0.22, res=0.002, interleaves=8,
                                              density=lambda u: 1.0 + u * u))
    assert c.k_max == pytest.approx(250.0, rel=1e-6)


def test_rosette_nine_petals():
    c = gen_trajectory("rosette", RosetteParams(res=0.001, petals=9))
    r = np.linalg.norm(c.points, axis=1)
    assert c.k_max == pytest.approx(500.0, rel=1e-6)
    assert np.allclose(c.points[0], 0.0)
    # one tip per petal: local maxima of the radius at k_max
    tips = np.flatnonzero((r[1:-1] > r[:-2]) & (r[1:-1] >= r[2:]) & (r[1:-1] > 499.0))
    assert len(tips) == 9
    # passes through the origin between petals
    assert np.sum((r[1:-1] < 1e-6 * 500) | ((r[1:-1] < r[:-2]) & (r[1:-1] < r[2:]) & (r[1:-1] < 1.0))) >= 8


def test_rosette_rejects_ambiguous_petal_count():
    with pytest.raises(GeometryError, match="invalid-params"):
        gen_trajectory("rosette", RosetteParams(res=0.001, petals=6))
    with pytest.raises(GeometryError, match="invalid-params"):
        gen_trajectory("rosette", RosetteParams(res=0.001, petals=1))


def test_spiral_res_equals_fov_degenerate():
    c = gen_trajectory("spiral", SpiralParams(fov=0.22, res=0.22))
    assert c.k_max == pytest.approx(1 / 0.44, rel=1e-6)
    assert c.k_max == pytest.approx(2.27, abs=0.01)


def test_cepi_inside_disc():
    c = gen_trajectory("cepi", CepiParams(fov=0.26, res=0.0028, r_y=2))
    kmax = 1 / (2 * 0.0028)
    assert np.allclose(c.points[0], 0.0)
    assert c.k_max <= kmax * (1 + 1e-6)
    assert c.k_max > 0.95 * kmax


@pytest.mark.parametrize("kind,params", [
    ("spiral", dict(fov=-0.2, res=0.001)),
    ("spiral", dict(fov=0.2, res=0.0)),
    ("spiral", dict(fov=0.2, res=0.001, r_edge=0.5)),
    ("cepi", dict(fov=0.2, res=0.001, r_y=0.5)),
])
def test_invalid_params(kind, params):
    with pytest.raises(GeometryError, match="invalid-params"):
        gen_trajectory(kind, params)


def test_unsupported_kind():
    with pytest.raises(GeometryError, match="unsupported-kind"):
        gen_trajectory("radial", {})


def test_generated_density_at_least_8_per_raster():
    c = gen_trajectory("spiral", SpiralParams(fov=0.24, res=0.002))
    step = np.max(np.linalg.norm(np.diff(c.points, axis=0), axis=1))
    assert step <= HW.v_amp * HW.dt / 8


# --- arc length -------------------------------------------------------------

def test_straight_segment():
    p = np.linspace(0, 1, 50) ** 2  # non-uniform parameterization
    c = ParamCurve(np.c_[100 * p, 0 * p], np.linspace(0, 1, 50))
    arc = arclength_reparam(c, 64)
    assert arc.length == pytest.approx(100.0, rel=1e-12)
    assert np.allclose(arc.curvature, 0.0, atol=1e-9)
    assert np.allclose(np.diff(arc.positions[:, 0]), 100 / 63, rtol=1e-9)


def test_circle_length_and_curvature():
    arc = arclength_reparam(circle(), 4096)
    assert arc.length == pytest.approx(2 * np.pi * 100, rel=1e-6)
    assert np.all(np.abs(arc.curvature - 0.01) < 1e-4)
    assert np.allclose(np.linalg.norm(arc.tangent, axis=1), 1.0, atol=1e-6)
    chords = np.linalg.norm(np.diff(arc.positions, axis=0), axis=1)
    assert np.allclose(chords, arc.ds, rtol=1e-6)


def test_archimedean_spiral_curvature():
    a = 2.0
    th = np.linspace(0, 40 * np.pi, 400001)
    c = ParamCurve(np.c_[a * th * np.cos(th), a * th * np.sin(th)], th)
    arc = arclength_reparam(c, 8192)
    # closed form at the nearest input parameter for each arc sample
    s_in = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(c.points, axis=0), axis=1))])
    t = np.interp(arc.s_grid, s_in, th)
    exact = (t * t + 2) / (a * (t * t + 1) ** 1.5)
    sel = t > 0.5  # endpoint stencils are one-sided
    assert np.max(np.abs(arc.curvature[sel] / exact[sel] - 1)) < 1e-3


def test_length_matches_trapezoid():
    c = gen_trajectory("spiral", SpiralParams(fov=0.22, res=0.004))
    arc = arclength_reparam(c, 2048)
    assert arc.length == pytest.approx(trapezoid_length(c), rel=1e-5)


def test_degenerate_curve_and_small_n():
    p = np.linspace(0, 1, 6)
    with pytest.raises(GeometryError, match="degenerate-curve"):
        arclength_reparam(ParamCurve(np.zeros((6, 2)), p), 32)
    with pytest.raises(GeometryError):
        arclength_reparam(circle(), 8)


def test_positions_on_polyline():
    c = circle(m=2001)
    arc = arclength_reparam(c, 777)
    from optiks.analysis import _distance_to_polyline
    assert np.max(_distance_to_polyline(arc.positions, c.points)) <= 1e-6 * arc.length


def test_default_arc_samples_rules():
    n = default_arc_samples(1000.0, HW)
    step = 1000.0 / (n - 1)
    assert step <= HW.v_amp * HW.dt / 4
    assert step <= 0.5 * HW.gamma_bar * HW.s_max * HW.dt ** 2
    n2 = default_arc_samples(1000.0, HW, kappa_max=100.0)
    assert 1000.0 / (n2 - 1) <= 0.5 * HW.dt * np.sqrt(HW.gamma_bar * HW.s_max / 100.0) * (1 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(rho=st.floats(20, 500), n=st.integers(64, 2048))
def test_arc_invariants_on_circles(rho, n):
    arc = arclength_reparam(circle(rho, m=4001), n)
    assert np.allclose(np.linalg.norm(arc.tangent, axis=1), 1.0, atol=1e-6)
    assert np.all(arc.curvature >= 0)
    assert np.allclose(np.diff(arc.s_grid), arc.ds, rtol=1e-9)


# --- speed limit ------------------------------------------------------------

def test_speed_limit_straight():
    hw = HardwareLimits(0.1, 195.0)
    v = speed_limit(np.zeros(5), hw)
    assert np.all(v == hw.gamma_bar * 0.1)
    assert v[0] == pytest.approx(4.2577e6, rel=1e-4)


def test_speed_limit_circle_and_extremes():
    v = speed_limit(np.array([0.01, 1e12]), HW)
    assert v[0] == pytest.approx(min(HW.gamma_bar * 0.1, np.sqrt(HW.gamma_bar * 195 * 100)))
    assert v[1] < 1e-1


@settings(max_examples=50, deadline=None)
@given(k=st.lists(st.floats(0, 10), min_size=2, max_size=20), g=st.floats(0.01, 0.2))
def test_speed_limit_monotone_and_linear(k, g):
    k = np.sort(np.array(k))
    hw = HardwareLimits(g, 150.0)
    v = speed_limit(k, hw)
    assert np.all(np.diff(v) <= 1e-9 * v[0])
    assert np.all((v > 0) & (v <= hw.v_amp))
    v2 = speed_limit(k, HardwareLimits(2 * g, 150.0))
    amp = v < hw.v_amp * (1 - 1e-12)
    both_amp = ~amp & (v2 >= 2 * hw.v_amp * (1 - 1e-12))
    assert np.allclose(v2[both_amp], 2 * v[both_amp])
