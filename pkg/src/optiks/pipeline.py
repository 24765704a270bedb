"""Differentiable chain from the speed variable to the gradient waveform.

    xi(s) -> v(s) -> t(s) -> s(t) -> C(t) -> g(t) -> S(t)

Every stage has a hand-written vector-Jacobian product. The two linear
interpolations (inverting t(s), then looking positions up at s(t)) are
differentiated with their bin assignments held fixed, which is exact for the
frozen bins and ignores the (measure-zero) bin switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.special import expit

from .geometry import ArcCurve, HardwareLimits, speed_limit


class PipelineError(ValueError):
    pass


class StaleCacheError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# waveform


@dataclass(frozen=True)
class Waveform:
    """Per-axis gradient samples ``g`` (n_t, D) in T/m on a raster ``dt``."""

    g: np.ndarray
    dt: float

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        if g.ndim != 2:
            raise PipelineError("waveform must be (n_t, D)")
        if not np.all(np.isfinite(g)):
            raise PipelineError("waveform contains non-finite samples")
        if not self.dt > 0:
            raise PipelineError("dt must be positive")
        object.__setattr__(self, "g", g)

    @property
    def n_t(self) -> int:
        return self.g.shape[0]

    @property
    def axes(self) -> int:
        return self.g.shape[1]

    @property
    def duration(self) -> float:
        return (self.n_t - 1) * self.dt

    @cached_property
    def slew(self) -> np.ndarray:
        """Forward-difference slew, (n_t - 1, D) in T/m/s."""
        return np.diff(self.g, axis=0) / self.dt

    def rotated(self, rot: np.ndarray) -> "Waveform":
        return Waveform(self.g @ np.asarray(rot).T, self.dt)


# ---------------------------------------------------------------------------
# elementary stages


def speed_from_xi(xi: np.ndarray, v_max: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    v_max = np.asarray(v_max, dtype=float)
    if xi.shape != v_max.shape:
        raise PipelineError(f"xi has shape {xi.shape}, speed limit {v_max.shape}")
    return v_max * expit(xi)


def timing_from_speed(v: np.ndarray, arc: ArcCurve | float):
    """Cumulative traversal time ``t(s)`` and total duration ``T``.

    Each arc segment is crossed at the mean of its end speeds, which is exact
    for constant tangential acceleration and tolerates a zero speed at either
    end of the curve (the time-optimal profile starts from rest).
    """
    ds = arc.ds if isinstance(arc, ArcCurve) else float(arc)
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or np.any(v[1:-1] <= 0) or np.any(v[:-1] + v[1:] <= 0):
        raise PipelineError("nonpositive-speed: speed must be positive along the curve")
    tau = 2.0 * ds / (v[:-1] + v[1:])
    t = np.concatenate([[0.0], np.cumsum(tau)])
    return t, float(t[-1])


@dataclass(frozen=True)
class InterpPlan:
    """Bin of every query: ``x[lo[i]] <= p[i] <= x[lo[i] + 1]``."""

    lo: np.ndarray

    @property
    def hi(self) -> np.ndarray:
        return self.lo + 1


def _weights(x, p, plan):
    x1 = x[plan.lo]
    width = x[plan.hi] - x1
    return (p - x1) / width, width


def interp_linear(x: np.ndarray, y: np.ndarray, p: np.ndarray,
                  plan: Optional[InterpPlan] = None):
    """Piecewise-linear ``q = y(p)`` on knots ``x``; returns ``(q, plan)``.

    ``y`` may carry trailing axes (one column per output channel). With a
    supplied ``plan`` the bins are reused as-is, so queries that drifted
    outside them are extrapolated along the frozen segment.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if plan is None:
        if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
            raise PipelineError("non-monotonic-x: knots must be strictly increasing")
        span = x[-1] - x[0]
        guard = 1e-9 * span
        if np.any(p < x[0] - guard) or np.any(p > x[-1] + guard):
            raise PipelineError("query-out-of-range")
        p = np.clip(p, x[0], x[-1])
        lo = np.searchsorted(x, p, side="right") - 1
        plan = InterpPlan(np.clip(lo, 0, x.size - 2))
    frac, _ = _weights(x, p, plan)
    if y.ndim > 1:
        frac = frac.reshape(frac.shape + (1,) * (y.ndim - 1))
    q = (1.0 - frac) * y[plan.lo] + frac * y[plan.hi]
    return q, plan


def interp_vjp(plan: InterpPlan, x, y, p, cot_q):
    """Cotangents of ``interp_linear`` with respect to ``(x, y, p)``.

    For a query in bin ``[x1, x2]`` with values ``[y1, y2]``::

        dq/dp  = (y2 - y1) / (x2 - x1)
        dq/dx1 = (y1 - y2) (x2 - p) / (x2 - x1)^2
        dq/dx2 = (y1 - y2) (p - x1) / (x2 - x1)^2
        dq/dy1 = (x2 - p) / (x2 - x1),   dq/dy2 = (p - x1) / (x2 - x1)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    cot_q = np.asarray(cot_q, dtype=float)
    lo, hi = plan.lo, plan.hi
    if p.shape != lo.shape or cot_q.shape[: p.ndim] != p.shape or cot_q.shape[1:] != y.shape[1:]:
        raise PipelineError("shape-mismatch between plan, queries and cotangent")
    frac, width = _weights(x, p, plan)
    dy = y[hi] - y[lo]
    if y.ndim > 1:
        slope_dot = np.sum(dy * cot_q, axis=tuple(range(1, y.ndim)))
        f = frac.reshape(frac.shape + (1,) * (y.ndim - 1))
    else:
        slope_dot = dy * cot_q
        f = frac
    cot_p = slope_dot / width
    n = x.size
    cot_x = (np.bincount(lo, -slope_dot * (1.0 - frac) / width, minlength=n)
             + np.bincount(hi, -slope_dot * frac / width, minlength=n))
    wl = ((1.0 - f) * cot_q).reshape(lo.size, -1)
    wh = (f * cot_q).reshape(lo.size, -1)
    cot_y = np.column_stack([np.bincount(lo, wl[:, j], minlength=n) + np.bincount(hi, wh[:, j], minlength=n)
                             for j in range(wl.shape[1])]).reshape(y.shape)
    return cot_x, cot_y, cot_p


def raster_size(T: float, dt: float) -> int:
    # the guard keeps exact multiples of dt (e.g. 8 ms / 4 us) on the long side
    return int(np.floor(T / dt * (1.0 + 1e-12) + 1e-9)) + 1


def resample_to_time(arc: ArcCurve, t_of_s: np.ndarray, dt: float,
                     n_t: Optional[int] = None, plans=None):
    """Positions ``C(t)`` on a uniform raster of ``n_t`` samples.

    The raster spans the traversal exactly: sample ``k`` is taken at time
    ``k*T/(n_t-1)`` with ``n_t = floor(T/dt) + 1``, i.e. the designed timing
    is played out stretched by at most one raster period so the curve ends
    on its endpoint. Returns ``(C, s_of_t, t_query, (plan_t, plan_s))``.
    """
    T = float(t_of_s[-1])
    if np.any(np.diff(t_of_s) <= 0):
        raise PipelineError("t(s) must be strictly increasing")
    if n_t is None:
        n_t = raster_size(T, dt)
    if n_t < 4:
        raise PipelineError(f"raster-too-coarse: only {n_t} raster samples")
    t_query = np.linspace(0.0, T, n_t)
    plan_t = plan_s = None
    if plans is not None:
        plan_t, plan_s = plans
    s_of_t, plan_t = interp_linear(t_of_s, arc.s_grid, t_query, plan_t)
    c_t, plan_s = interp_linear(arc.s_grid, arc.positions, s_of_t, plan_s)
    return c_t, s_of_t, t_query, (plan_t, plan_s)


def gradient_and_slew(c_t: np.ndarray, hw: HardwareLimits) -> Waveform:
    """``g[n] = (C[n+1] - C[n]) / (gamma*dt)``; the last sample is held."""
    c_t = np.asarray(c_t, dtype=float)
    if c_t.shape[0] < 4:
        raise PipelineError("raster-too-coarse: fewer than 4 positions")
    g = np.empty_like(c_t)
    g[:-1] = np.diff(c_t, axis=0) / (hw.gamma_bar * hw.dt)
    g[-1] = g[-2]
    return Waveform(g, hw.dt)


# ---------------------------------------------------------------------------
# full pass


@dataclass
class ForwardCache:
    xi: np.ndarray
    arc: ArcCurve
    hw: HardwareLimits
    v_max: np.ndarray
    sig: np.ndarray
    v: np.ndarray
    t_of_s: np.ndarray
    T: float
    t_query: np.ndarray
    s_of_t: np.ndarray
    c_t: np.ndarray
    plans: tuple
    waveform: Waveform
    n_t: int = field(init=False)

    def __post_init__(self):
        self.n_t = self.waveform.n_t


def forward_design_pass(xi: np.ndarray, arc: ArcCurve, hw: HardwareLimits,
                        frozen: Optional[ForwardCache] = None,
                        v_max: Optional[np.ndarray] = None) -> ForwardCache:
    """Run the chain for ``xi``; the cache feeds :func:`backward_design_pass`.

    Passing ``frozen`` reuses its raster length and interpolation bins, which
    makes the map smooth in ``xi`` (used for finite-difference checks).
    """
    xi = np.array(xi, dtype=float)
    if xi.shape != arc.s_grid.shape:
        raise PipelineError("xi must live on the arc-length grid")
    if not np.all(np.isfinite(xi)):
        raise PipelineError("xi contains non-finite values")
    if v_max is None:
        v_max = speed_limit(arc, hw)
    sig = expit(xi)
    v = v_max * sig
    t_of_s, T = timing_from_speed(v, arc)
    if frozen is None:
        c_t, s_of_t, t_query, plans = resample_to_time(arc, t_of_s, hw.dt)
    else:
        t_query = np.linspace(0.0, T, frozen.n_t)
        plan_t, plan_s = frozen.plans
        s_of_t, _ = interp_linear(t_of_s, arc.s_grid, t_query, plan_t)
        c_t, _ = interp_linear(arc.s_grid, arc.positions, s_of_t, plan_s)
        plans = frozen.plans
    wf = gradient_and_slew(c_t, hw)
    return ForwardCache(xi, arc, hw, v_max, sig, v, t_of_s, T, t_query, s_of_t, c_t, plans, wf)


def backward_design_pass(cache: ForwardCache, cot_g: Optional[np.ndarray] = None,
                         cot_slew: Optional[np.ndarray] = None, cot_T: float = 0.0,
                         xi: Optional[np.ndarray] = None) -> np.ndarray:
    """Pull loss cotangents on ``(g, S, T)`` back to ``d loss / d xi``."""
    if xi is not None and not np.array_equal(np.asarray(xi), cache.xi):
        raise StaleCacheError("stale-cache: xi changed since the forward pass")
    arc, hw = cache.arc, cache.hw
    n_t, dims = cache.waveform.g.shape
    cg = np.zeros((n_t, dims)) if cot_g is None else np.array(cot_g, dtype=float).reshape(n_t, dims)
    if cot_slew is not None:
        cs = np.asarray(cot_slew, dtype=float).reshape(n_t - 1, dims) / hw.dt
        cg[:-1] -= cs
        cg[1:] += cs
    # held last sample
    cg[-2] += cg[-1]
    cg = cg[:-1] / (hw.gamma_bar * hw.dt)
    cot_c = np.zeros((n_t, dims))
    cot_c[1:] += cg
    cot_c[:-1] -= cg

    plan_t, plan_s = cache.plans
    _, _, cot_s_of_t = interp_vjp(plan_s, arc.s_grid, arc.positions, cache.s_of_t, cot_c)
    cot_t_of_s, _, cot_tq = interp_vjp(plan_t, cache.t_of_s, arc.s_grid, cache.t_query, cot_s_of_t)

    cot_T_total = float(cot_T) + float(np.dot(cot_tq, np.arange(n_t) / (n_t - 1)))
    cot_t_of_s[-1] += cot_T_total
    # t[k] = sum_{i<k} tau_i
    cot_tau = np.cumsum(cot_t_of_s[:0:-1])[::-1]
    v = cache.v
    pair = v[:-1] + v[1:]
    dtau_dv = -2.0 * arc.ds / (pair * pair)
    cot_v = np.zeros_like(v)
    cot_v[:-1] += cot_tau * dtau_dv
    cot_v[1:] += cot_tau * dtau_dv
    return cot_v * cache.v_max * cache.sig * (1.0 - cache.sig)


def waveform_from_speed(arc: ArcCurve, v: np.ndarray, hw: HardwareLimits):
    """Waveform for an explicit speed profile; returns ``(Waveform, T, s_of_t)``."""
    t_of_s, T = timing_from_speed(v, arc)
    c_t, s_of_t, _, _ = resample_to_time(arc, t_of_s, hw.dt)
    return gradient_and_slew(c_t, hw), T, s_of_t
