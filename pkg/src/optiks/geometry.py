"""k-space trajectory containers, generators and arc-length geometry.

Positions are in cycles/m and speeds in cycles/m/s, so a gradient ``g`` in
T/m moves along the curve at ``gamma_bar * |g|`` with ``gamma_bar`` in Hz/T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

GAMMA_BAR_1H = 42_577_478.518  # Hz/T


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareLimits:
    g_max: float  # T/m
    s_max: float  # T/m/s
    gamma_bar: float = GAMMA_BAR_1H
    dt: float = 4e-6

    def __post_init__(self):
        for name in ("g_max", "s_max", "gamma_bar", "dt"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise GeometryError(f"hardware limit {name} must be positive, got {val}")

    @property
    def v_amp(self) -> float:
        """Amplitude-limited k-space speed, cycles/m/s."""
        return self.gamma_bar * self.g_max

    def with_smax(self, s_max: float) -> "HardwareLimits":
        return HardwareLimits(self.g_max, s_max, self.gamma_bar, self.dt)


@dataclass(frozen=True)
class ParamCurve:
    """Trajectory samples ``points[i]`` at strictly increasing ``params[i]``."""

    points: np.ndarray  # (M, D)
    params: np.ndarray  # (M,)
    label: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        prm = np.asarray(self.params, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "params", prm)
        if pts.ndim != 2 or pts.shape[1] not in (1, 2, 3):
            raise GeometryError(f"points must be (M, D) with D in 1..3, got {pts.shape}")
        if prm.shape != (pts.shape[0],):
            raise GeometryError("params and points lengths differ")
        if pts.shape[0] < 4:
            raise GeometryError("a curve needs at least 4 samples")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(prm))):
            raise GeometryError("curve contains non-finite values")
        if np.any(np.diff(prm) <= 0):
            raise GeometryError("non-monotonic-params: params must be strictly increasing")

    @property
    def dims(self) -> int:
        return self.points.shape[1]

    @property
    def k_max(self) -> float:
        return float(np.max(np.linalg.norm(self.points, axis=1)))


@dataclass(frozen=True)
class ArcCurve:
    """A curve sampled uniformly in Euclidean arc length."""

    s_grid: np.ndarray  # (N,)
    positions: np.ndarray  # (N, D)
    tangent: np.ndarray  # (N, D), unit
    curvature: np.ndarray  # (N,)
    length: float

    @property
    def n(self) -> int:
        return self.s_grid.shape[0]

    @property
    def ds(self) -> float:
        return self.length / (self.n - 1)

    @property
    def dims(self) -> int:
        return self.positions.shape[1]

    @property
    def k_max(self) -> float:
        return float(np.max(np.linalg.norm(self.positions, axis=1)))


# ---------------------------------------------------------------------------
# generators


@dataclass
class SpiralParams:
    """Archimedean spiral with a radially varying undersampling factor.

    The spacing between neighbouring turns at radius ``r`` is
    ``interleaves * density(r / k_max) / fov``. ``density`` defaults to a
    linear ramp from ``r_center`` to ``r_edge``.
    """

    fov: float
    res: float
    interleaves: int = 1
    r_center: float = 1.0
    r_edge: float = 1.0
    density: Optional[Callable[[float], float]] = None
    max_step: float = 2.0  # cycles/m between samples
    max_turn: float = 2e-3  # radians of tangent rotation between samples


@dataclass
class RosetteParams:
    res: float
    petals: int = 9
    max_step: float = 2.0
    max_turn: float = 2e-3


@dataclass
class CepiParams:
    """Circular EPI: x readouts clipped to a disc, rounded turnarounds."""

    fov: float
    res: float
    r_y: float = 1.0
    max_step: float = 2.0
    max_turn: float = 2e-3


def _check_positive(**kw):
    for name, val in kw.items():
        if not (np.isfinite(val) and val > 0):
            raise GeometryError(f"invalid-params: {name} must be positive, got {val}")


def _n_samples(length: float, turning: float, p: SpiralParams | RosetteParams | CepiParams) -> int:
    return int(max(np.ceil(length / p.max_step), np.ceil(turning / p.max_turn), 64)) + 1


def _spiral(p: SpiralParams) -> ParamCurve:
    _check_positive(fov=p.fov, res=p.res)
    if p.interleaves < 1:
        raise GeometryError("invalid-params: interleaves must be >= 1")
    k_max = 1.0 / (2.0 * p.res)
    if p.density is None:
        if p.r_center < 1 or p.r_edge < 1:
            raise GeometryError("invalid-params: undersampling R must be >= 1")
        a0 = p.interleaves * p.r_center / (2 * np.pi * p.fov)
        a1 = p.interleaves * (p.r_edge - p.r_center) / (2 * np.pi * p.fov * k_max)
        # dr/dtheta = a0 + a1*r  (closed form)
        if abs(a1) * k_max < 1e-12 * a0:
            theta_max = k_max / a0
            radius = lambda th: a0 * th
        else:
            theta_max = math.log1p(a1 * k_max / a0) / a1
            radius = lambda th: a0 / a1 * np.expm1(a1 * th)
    else:
        dens = p.density

        def rhs(_th, r):
            d = float(dens(min(r[0] / k_max, 1.0)))
            if d < 1:
                raise GeometryError("invalid-params: undersampling R must be >= 1")
            return [p.interleaves * d / (2 * np.pi * p.fov)]

        hit = lambda _th, r: r[0] - k_max
        hit.terminal = True
        sol = solve_ivp(rhs, (0.0, 1e9), [0.0], events=hit, dense_output=True,
                        rtol=1e-11, atol=1e-12 * k_max, method="DOP853")
        theta_max = float(sol.t_events[0][0])
        radius = lambda th: sol.sol(th)[0]
    # arc length of an Archimedean spiral ~ r*theta/2 at the rim, bounded by
    # the sum of radii; a conservative estimate is enough to size the grid
    est_len = k_max * theta_max
    n = _n_samples(est_len, theta_max, p)
    theta = np.linspace(0.0, theta_max, n)
    r = np.asarray(radius(theta), dtype=float)
    r[0] = 0.0
    r[-1] = k_max
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return ParamCurve(pts, theta, label=f"spiral fov={p.fov} res={p.res}")


def _rosette(p: RosetteParams) -> ParamCurve:
    _check_positive(res=p.res)
    if p.petals < 2:
        raise GeometryError("invalid-params: rosette needs at least 2 petals")
    if p.petals % 4 == 2:
        raise GeometryError("invalid-params: petal count must be odd or a multiple of 4")
    k_max = 1.0 / (2.0 * p.res)
    # k = k_max sin(w1 u) exp(i u); odd n closes after u = pi, even n after 2pi
    w1 = p.petals if p.petals % 2 else p.petals // 2
    u_max = np.pi if p.petals % 2 else 2 * np.pi
    # the petal tips turn fastest: curvature there ~ (1 + w1^2)/k_max
    est_len = 2.0 * k_max * p.petals * 1.3
    turning = u_max * (1 + w1 * w1)
    n = _n_samples(est_len, turning, p)
    u = np.linspace(0.0, u_max, n)
    r = k_max * np.sin(w1 * u)
    pts = np.stack([r * np.cos(u), r * np.sin(u)], axis=1)
    pts[0] = 0.0
    return ParamCurve(pts, u, label=f"rosette petals={p.petals} res={p.res}")


def _bezier(p0, p1, p2, p3, n):
    u = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - u) ** 3) * p0 + 3 * ((1 - u) ** 2) * u * p1 + 3 * (1 - u) * u * u * p2 + u ** 3 * p3


def _cepi(p: CepiParams) -> ParamCurve:
    _check_positive(fov=p.fov, res=p.res)
    if p.r_y < 1:
        raise GeometryError("invalid-params: undersampling R must be >= 1")
    k_max = 1.0 / (2.0 * p.res)
    dky = p.r_y / p.fov
    n_lines = int(np.floor(2 * k_max / dky))
    if n_lines < 2:
        raise GeometryError("invalid-params: field of view too small for two lines")
    ky = (np.arange(n_lines) - (n_lines - 1) / 2.0) * dky
    # lines stop short of the disc so the turnaround arcs stay inside k_max
    x_end = np.sqrt(np.maximum(k_max ** 2 - ky ** 2, 0.0)) - dky / 2
    x_end = np.maximum(x_end, dky)
    ds = min(p.max_step, dky * p.max_turn)

    def seg_line(a, b):
        m = max(int(np.ceil(np.linalg.norm(b - a) / p.max_step)), 2)
        return np.linspace(a, b, m + 1)

    pieces = []
    direction = 1.0
    start = np.array([-x_end[0], ky[0]])
    # prewinder from the origin: leave radially, arrive heading +x
    lead = np.linalg.norm(start)
    m = max(int(np.ceil(np.pi * lead / ds)), 64)
    pieces.append(_bezier(np.zeros(2), start * 0.5 + np.array([0.0, 0.0]),
                          start - np.array([lead / 3, 0.0]), start, m))
    for j in range(n_lines):
        a = np.array([-direction * x_end[j], ky[j]])
        b = np.array([direction * x_end[j], ky[j]])
        pieces.append(seg_line(a, b)[1:])
        if j + 1 < n_lines:
            c = np.array([direction * x_end[j + 1], ky[j + 1]])
            arm = np.array([direction * 4.0 * dky / 6.0, 0.0])
            m = max(int(np.ceil(np.pi * dky / ds)), 32)
            pieces.append(_bezier(b, b + arm, c + arm, c, m)[1:])
            direction = -direction
    pts = np.concatenate(pieces, axis=0)
    keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12])
    pts = pts[keep]
    # turnaround bulges may poke slightly past the disc; shrink uniformly
    pts *= min(1.0, k_max / np.max(np.linalg.norm(pts, axis=1)))
    chord =np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return ParamCurve(pts, chord, label=f"cepi fov={p.fov} res={p.res} R={p.r_y}")


_GENERATORS = {"spiral": (_spiral, SpiralParams), "rosette": (_rosette, RosetteParams),
               "cepi": (_cepi, CepiParams)}


def gen_trajectory(kind: str, params) -> ParamCurve:
    """Build a trajectory of the given ``kind`` ('spiral', 'rosette' or 'cepi').

    ``params`` is the matching *Params dataclass or a plain dict of its fields.
    Every generated curve starts at the k-space origin and ends on or inside
    the disc of radius ``1/(2*res)``.
    """
    if kind not in _GENERATORS:
        raise GeometryError(f"unsupported-kind: {kind!r}")
    fn, cls = _GENERATORS[kind]
    if isinstance(params, dict):
        params = cls(**params)
    if not isinstance(params, cls):
        raise GeometryError(f"{kind} needs {cls.__name__}, got {type(params).__name__}")
    return fn(params)


# ---------------------------------------------------------------------------
# arc length


MAX_ARC_SAMPLES = 1 << 21


def default_arc_samples(length: float, hw: HardwareLimits, kappa_max: float = 0.0) -> int:
    """Smallest N whose spacing resolves the raster at every attainable speed.

    The spacing is at most a quarter of the fastest raster step and at most
    half the raster step taken at the slowest curvature-limited speed: a
    polyline corner crossed within a single raster period turns into a slew
    spike, so high-curvature regions need knots closer than ``v*dt``. The
    first segment, entered from rest at full acceleration, must also take no
    longer than one raster period, which bounds the spacing by
    ``gamma*S_max*dt**2/2``.
    """
    step = min(hw.v_amp * hw.dt / 4.0, 0.5 * hw.gamma_bar * hw.s_max * hw.dt ** 2)
    if kappa_max > 0:
        step = min(step, 0.5 * hw.dt * np.sqrt(hw.gamma_bar * hw.s_max / kappa_max))
    return int(min(max(int(np.ceil(length / step)) + 1, 16), MAX_ARC_SAMPLES))


def _derivatives(points: np.ndarray, params: np.ndarray):
    d1 = np.gradient(points, params, axis=0, edge_order=2)
    d2 = np.gradient(d1, params, axis=0, edge_order=2)
    return d1, d2


def _curvature(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    speed2 = np.sum(d1 * d1, axis=1)
    cross2 = speed2 * np.sum(d2 * d2, axis=1) - np.sum(d1 * d2, axis=1) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.sqrt(np.maximum(cross2, 0.0)) / speed2 ** 1.5
    return np.where(speed2 > 0, kappa, 0.0)


def arclength_reparam(c: ParamCurve, n: Optional[int] = None,
                      hw: Optional[HardwareLimits] = None) -> ArcCurve:
    """Resample ``c`` on ``n`` points equally spaced in arc length.

    Positions are taken on the input polyline, so they never leave the
    prescribed path. Tangent and curvature come from central differences in
    the input parameterization and are carried over through ``s(p)``.
    """
    pts, prm = c.points, c.params
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s_of_p = np.concatenate([[0.0], np.cumsum(seg)])
    length = float(s_of_p[-1])
    if not length > 0:
        raise GeometryError("degenerate-curve: zero total length")
    d1, d2 = _derivatives(pts, prm)
    kappa_all = _curvature(d1, d2)
    if n is None:
        n = default_arc_samples(length, hw or HardwareLimits(0.1, 200.0), float(np.max(kappa_all)))
    if n < 16:
        raise GeometryError("need at least 16 arc-length samples")

    # drop repeated vertices so s(p) is invertible
    keep = np.concatenate([[True], seg > 0])
    pts_k, prm_k, s_k = pts[keep], prm[keep], s_of_p[keep]

    s_grid = np.linspace(0.0, length, n)
    s_grid[-1] = length
    idx = np.clip(np.searchsorted(s_k, s_grid, side="right"), 1, len(s_k) - 1)
    w = ((s_grid - s_k[idx - 1]) / (s_k[idx] - s_k[idx - 1]))[:, None]
    positions = (1 - w) * pts_k[idx - 1] + w * pts_k[idx]

    kappa_p = kappa_all[keep]
    d1k = d1[keep]
    tan = (1 - w) * d1k[idx - 1] + w * d1k[idx]
    norm = np.linalg.norm(tan, axis=1, keepdims=True)
    # fall back to the chord direction where the derivative vanishes
    chord = pts_k[idx] - pts_k[idx - 1]
    chord = chord / np.linalg.norm(chord, axis=1, keepdims=True)
    tangent = np.where(norm > 0, tan / np.where(norm > 0, norm, 1.0), chord)
    curvature = (1 - w[:, 0]) * kappa_p[idx - 1] + w[:, 0] * kappa_p[idx]
    return ArcCurve(s_grid, positions, tangent, np.maximum(curvature, 0.0), length)


def trapezoid_length(c: ParamCurve) -> float:
    d1, _ = _derivatives(c.points, c.params)
    return float(np.trapezoid(np.linalg.norm(d1, axis=1), c.params))


def speed_limit(arc: ArcCurve, hw: HardwareLimits) -> np.ndarray:
    """Pointwise bound ``min(gamma*G_max, sqrt(gamma*S_max/kappa))``."""
    kappa = arc.curvature if isinstance(arc, ArcCurve) else np.asarray(arc, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        curv = np.sqrt(hw.gamma_bar * hw.s_max / kappa)
    return np.minimum(hw.v_amp, curv)


def rotate(points: np.ndarray, rot: np.ndarray) -> np.ndarray:
    return np.asarray(points) @ np.asarray(rot).T
