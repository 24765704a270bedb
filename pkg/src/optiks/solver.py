"""Time-optimal baseline, Adam descent on the speed variable, and de-rating."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logit

from .analysis import LimitReport, verify_limits
from .geometry import ArcCurve, HardwareLimits, speed_limit
from .losses import (AcousticTerm, Atf, BandSet, BandTerm, BarrierConfig, BoundTimeTerm,
                     LossWeights, PnsTerm, SlewTerm, TimeTerm, assemble_loss)
from .pipeline import (Waveform, backward_design_pass, forward_design_pass, interp_linear,
                       interp_vjp, waveform_from_speed)


class SolverError(RuntimeError):
    pass


class DesignSpecError(ValueError):
    pass


TERMINAL_POLICIES = ("free", "zero")


@dataclass(frozen=True)
class SolverConfig:
    init_derate: float = 0.9
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 5000
    terminal: str = "free"
    seed: int = 0
    tol: float = 1e-5
    window: int = 200
    time_limit: Optional[float] = None  # wall-clock cap in seconds
    control_spacing: float = 1.0  # raster steps at full speed; 0 optimizes every arc sample

    def __post_init__(self):
        if not 0.8 <= self.init_derate < 1.0:
            raise DesignSpecError("init_derate must lie in [0.8, 1)")
        if not self.step_size > 0:
            raise DesignSpecError("step_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise DesignSpecError("invalid Adam moments")
        if self.max_iters < 1:
            raise DesignSpecError("max_iters must be at least 1")
        if self.terminal not in TERMINAL_POLICIES:
            raise DesignSpecError(f"terminal must be one of {TERMINAL_POLICIES}")
        if not self.control_spacing >= 0:
            raise DesignSpecError("control_spacing must be nonnegative")
        if self.window < 1 or not self.tol > 0:
            raise DesignSpecError("invalid convergence window or tolerance")


@dataclass(frozen=True)
class DesignSpec:
    hw: HardwareLimits
    weights: LossWeights
    delta_slew: float = 2e-4
    delta_pns: float = 5e-5
    delta_time: Optional[float] = None
    p_max: Optional[float] = None
    t_max: Optional[float] = None
    bands: Optional[BandSet] = None
    atf: Optional[Atf] = None
    pns_model: Optional[object] = None
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        w = self.weights
        if w.lambda_pns > 0:
            if self.pns_model is None:
                raise DesignSpecError("lambda_pns > 0 requires pns_model")
            if self.p_max is None:
                raise DesignSpecError("lambda_pns > 0 requires p_max")
        if w.lambda_bound_time > 0 and self.t_max is None:
            raise DesignSpecError("lambda_bound_time > 0 requires t_max")
        if w.lambda_band > 0:
            if self.bands is None or len(self.bands) == 0:
                raise DesignSpecError("lambda_band > 0 requires bands")
            self.bands.check_nyquist(self.hw.dt)
        if w.lambda_acoustic > 0 and self.atf is None:
            raise DesignSpecError("lambda_acoustic > 0 requires atf")
        if self.p_max is not None and not self.p_max > 0:
            raise DesignSpecError("p_max must be positive")
        if self.t_max is not None and not self.t_max > 0:
            raise DesignSpecError("t_max must be positive")

    def terms(self) -> dict:
        out = {"slew": SlewTerm(BarrierConfig(self.hw.s_max, self.delta_slew))}
        if self.weights.lambda_time > 0:
            out["time"] = TimeTerm()
        if self.weights.lambda_bound_time > 0:
            out["bound_time"] = BoundTimeTerm(self.t_max, self.delta_time)
        if self.weights.lambda_pns > 0:
            out["pns"] = PnsTerm(self.pns_model, BarrierConfig(self.p_max, self.delta_pns))
        if self.weights.lambda_band > 0:
            out["band"] = BandTerm(self.bands)
        if self.weights.lambda_acoustic > 0:
            out["acoustic"] = AcousticTerm(self.atf)
        return out

    def limits(self, w: Waveform) -> LimitReport:
        pm = self.pns_model if self.p_max is not None else None
        tm = self.t_max if self.weights.lambda_bound_time > 0 else None
        return verify_limits(w, self.hw, pm, self.p_max, tm)


@dataclass
class DesignResult:
    waveform: Waveform
    v: np.ndarray
    xi: np.ndarray
    duration: float
    s_of_t: np.ndarray
    loss_trace: np.ndarray
    best_trace: np.ndarray
    terms: dict
    report: LimitReport
    iterations: int
    converged: bool
    feasible: bool
    best_iteration: int


# ---------------------------------------------------------------------------
# time-optimal speed


def _sweep(u0: float, vmax2: np.ndarray, kappa: np.ndarray, acc: float, ds: float) -> np.ndarray:
    n = vmax2.size
    u = np.empty(n)
    u[0] = min(u0, vmax2[0])
    acc2 = acc * acc
    k2 = kappa * kappa
    two_ds = 2.0 * ds
    for i in range(n - 1):
        ui = u[i]
        room = acc2 - k2[i] * ui * ui
        nxt = ui + two_ds * np.sqrt(room) if room > 0 else ui
        u[i + 1] = nxt if nxt < vmax2[i + 1] else vmax2[i + 1]
    return u


def time_optimal_speed(arc: ArcCurve, hw: HardwareLimits, terminal: str = "free",
                       v_cap: Optional[np.ndarray] = None) -> np.ndarray:
    """Fastest speed profile obeying the amplitude, curvature and slew bounds.

    Integrates ``d(v^2)/ds = 2*sqrt((gamma*S)^2 - kappa^2 v^4)`` forward from
    rest at ``s = 0`` and backward from the end, keeping the pointwise minimum.
    An optional ``v_cap`` lowers the pointwise speed bound further.
    """
    if terminal not in TERMINAL_POLICIES:
        raise SolverError(f"unknown terminal policy {terminal!r}")
    vmax = speed_limit(arc, hw)
    if v_cap is not None:
        vmax = np.minimum(vmax, v_cap)
    vmax2 = vmax * vmax
    acc = hw.gamma_bar * hw.s_max
    kappa = arc.curvature
    fwd = _sweep(0.0, vmax2, kappa, acc, arc.ds)
    end = 0.0 if terminal == "zero" else vmax2[-1]
    bwd = _sweep(end, vmax2[::-1], kappa[::-1], acc, arc.ds)[::-1]
    u = np.minimum(fwd, bwd)
    if np.any(u[1:-1] <= 0) or not np.all(np.isfinite(u)):
        raise SolverError("infeasible-grid: arc-length step too coarse for the acceleration bound")
    v = np.sqrt(u)
    v[0] = 0.0
    return v


def frequency_capped_speed(arc: ArcCurve, hw: HardwareLimits, f_max: float, s_start: float = 0.0,
                           terminal: str = "free") -> np.ndarray:
    """Time-optimal speed with the local turning rate held below ``f_max``.

    Along a curve traversed at speed ``v`` the tangent rotates at
    ``v*kappa/(2*pi)`` turns per second, which is the dominant frequency of
    the gradient there. Capping it from ``s_start`` onward moves that
    frequency below a resonance band; starting the cap where ``|g|`` is still
    small keeps the band crossing weak. Useful as a starting point for
    band-power designs.
    """
    if not f_max > 0:
        raise SolverError("f_max must be positive")
    with np.errstate(divide="ignore"):
        cap = 2.0 * np.pi * f_max / arc.curvature
    cap = np.where(arc.s_grid >= s_start, cap, np.inf)
    return time_optimal_speed(arc, hw, terminal, v_cap=cap)


def init_xi(v_star: np.ndarray, v_max: np.ndarray, alpha: float, eps: float = 1e-9) -> np.ndarray:
    ratio = alpha * np.asarray(v_star, float) / np.asarray(v_max, float)
    return logit(np.clip(ratio, eps, 1.0 - eps))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, xi: np.ndarray, grad: np.ndarray, cfg: SolverConfig):
    """One bias-corrected Adam update; returns ``(xi_new, state_new)``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != xi.shape or grad.shape != state.m.shape:
        raise SolverError("gradient shape does not match the variable")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise SolverError(f"non-finite-gradient at sample {bad} (step {state.t + 1})")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    step = cfg.step_size * mhat / (np.sqrt(vhat) + cfg.eps)
    return xi - step, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# descent


@dataclass(frozen=True)
class ControlGrid:
    """Coarse knots whose values are linearly interpolated onto the arc grid.

    Descending on a correction that is smooth at the raster scale keeps the
    speed free of sub-raster structure, which the sampled waveform cannot
    see between two raster instants.
    """

    knots: np.ndarray
    s_grid: np.ndarray
    plan: object

    @classmethod
    def build(cls, arc: ArcCurve, hw: HardwareLimits, spacing: float) -> Optional["ControlGrid"]:
        if spacing <= 0:
            return None
        m = int(np.ceil(arc.length / (spacing * hw.v_amp * hw.dt))) + 1
        if m >= arc.n:
            return None
        knots = np.linspace(0.0, arc.length, max(m, 4))
        _, plan = interp_linear(knots, np.zeros(knots.size), arc.s_grid)
        return cls(knots, arc.s_grid, plan)

    @property
    def size(self) -> int:
        return self.knots.size

    def expand(self, delta: np.ndarray) -> np.ndarray:
        return interp_linear(self.knots, delta, self.s_grid, self.plan)[0]

    def pull(self, cot: np.ndarray) -> np.ndarray:
        return interp_vjp(self.plan, self.knots, np.zeros(self.size), self.s_grid, cot)[1]


def _evaluate(xi, arc, spec, terms, v_max):
    cache = forward_design_pass(xi, arc, spec.hw, v_max=v_max)
    lv = assemble_loss(cache.waveform, cache.T, terms, spec.weights)
    return cache, lv


def run_design(arc: ArcCurve, spec: DesignSpec, v_init: Optional[np.ndarray] = None,
               callback=None) -> DesignResult:
    """Gradient descent on ``xi(s)`` for the objective described by ``spec``.

    Starts from the time-optimal profile scaled by ``init_derate`` (or from
    ``v_init`` scaled the same way) and descends on a correction carried by
    a :class:`ControlGrid`, or on every arc sample when the control spacing
    is zero. Stops at ``max_iters`` or when the smoothed loss changes by
    less than ``tol`` (relative) over ``window`` iterations while every
    limit is met. Returns the feasible iterate with the lowest loss, or the
    lowest-loss iterate if none was feasible.
    """
    cfg = spec.solver
    hw = spec.hw
    v_max = speed_limit(arc, hw)
    if v_init is None:
        v_init = time_optimal_speed(arc, hw, cfg.terminal)
    xi0 = init_xi(v_init, v_max, cfg.init_derate)
    grid = ControlGrid.build(arc, hw, cfg.control_spacing)
    n_var = arc.n if grid is None else grid.size
    delta = np.zeros(n_var)
    frozen = np.zeros(n_var, dtype=bool)
    frozen[0] = True
    if cfg.terminal == "zero":
        frozen[-1] = True
    terms = spec.terms()
    state = AdamState.zeros(n_var)

    trace, best_trace = [], []
    smooth_hist = []
    ema = None
    best = None  # (feasible, loss, it, xi, cache, lv, report)
    converged = False
    t_start = time.monotonic()
    it = 0
    for it in range(1, cfg.max_iters + 1):
        xi = xi0 + (delta if grid is None else grid.expand(delta))
        cache, lv = _evaluate(xi, arc, spec, terms, v_max)
        loss = lv.total
        if not np.isfinite(loss):
            raise SolverError(f"non-finite loss at iteration {it}")
        report = spec.limits(cache.waveform)
        feasible = report.passed
        better = (best is None or (feasible and not best[0])
                  or (feasible == best[0] and loss < best[1]))
        if better:
            best = (feasible, loss, it, xi, cache, lv, report)
        trace.append(loss)
        best_trace.append(best[1])
        if callback is not None:
            callback(it, loss, cache, lv, report)

        ema = loss if ema is None else 0.9 * ema + 0.1 * loss
        smooth_hist.append(ema)
        if feasible and it > cfg.window:
            ref = smooth_hist[-1 - cfg.window]
            if abs(ema - ref) <= cfg.tol * max(abs(ref), 1e-300):
                converged = True
                break
        if cfg.time_limit is not None and time.monotonic() - t_start > cfg.time_limit:
            break
        if it == cfg.max_iters:
            break

        grad = backward_design_pass(cache, lv.cot_g, lv.cot_slew, lv.cot_T)
        if grid is not None:
            grad = grid.pull(grad)
        grad[frozen] = 0.0
        delta, state = adam_step(state, delta, grad, cfg)

    feasible, loss, best_it, xi_b, cache, lv, report = best
    return DesignResult(
        waveform=cache.waveform, v=cache.v, xi=xi_b, duration=cache.waveform.duration,
        s_of_t=cache.s_of_t, loss_trace=np.array(trace), best_trace=np.array(best_trace),
        terms=dict(lv.terms), report=report, iterations=it, converged=converged,
        feasible=feasible, best_iteration=best_it)


# ---------------------------------------------------------------------------
# de-rated baseline


@dataclass(frozen=True)
class Baseline:
    s_max: float
    waveform: Waveform
    v: np.ndarray
    s_of_t: np.ndarray
    value: float  # achieved target quantity


def _probe(arc, hw, s_max, terminal):
    h = hw.with_smax(s_max)
    v = time_optimal_speed(arc, h, terminal)
    w, _, s_of_t = waveform_from_speed(arc, v, h)
    return v, w, s_of_t


def derate_baseline(arc: ArcCurve, hw: HardwareLimits, p_max: Optional[float] = None,
                    duration: Optional[float] = None, pns_model=None, terminal: str = "free",
                    rel_tol: float = 5e-3, max_probes: int = 60) -> Baseline:
    """Globally reduce ``s_max`` until the time-optimal design meets a target.

    With ``p_max`` the peak stimulation is brought within ``rel_tol`` below
    the target; with ``duration`` the waveform length is matched within
    ``rel_tol``. Each probe is a full time-optimal solve.
    """
    if (p_max is None) == (duration is None):
        raise SolverError("give exactly one of p_max or duration")
    if p_max is not None and pns_model is None:
        raise SolverError("a p_max target needs a PNS model")

    def measure(s):
        v, w, s_of_t = _probe(arc, hw, s, terminal)
        if p_max is not None:
            return float(np.max(pns_model.response(w.slew, w.dt))), (v, w, s_of_t)
        return w.duration, (v, w, s_of_t)

    def accept(val):
        if p_max is not None:
            return p_max * (1 - rel_tol) <= val <= p_max
        return abs(val - duration) <= rel_tol * duration

    val, out = measure(hw.s_max)
    if p_max is not None and val <= p_max:
        return Baseline(hw.s_max, out[1], out[0], out[2], val)
    if duration is not None and val >= duration * (1 - rel_tol):
        if val > duration * (1 + rel_tol):
            raise SolverError("target-unreachable: duration shorter than the time-optimal design")
        return Baseline(hw.s_max, out[1], out[0], out[2], val)

    # too fast at the hardware limit: the admissible s_max lies below
    hi = hw.s_max
    lo = hw.s_max
    for _ in range(max_probes):
        lo *= 0.5
        val, out = measure(lo)
        if accept(val):
            return Baseline(lo, out[1], out[0], out[2], val)
        too_fast = val > p_max if p_max is not None else val < duration
        if not too_fast:
            break
        hi = lo
    else:
        raise SolverError("target-unreachable")
    for _ in range(max_probes):
        mid = 0.5 * (lo + hi)
        val, out = measure(mid)
        if accept(val):
            return Baseline(mid, out[1], out[0], out[2], val)
        too_fast = val > p_max if p_max is not None else val < duration
        if too_fast:
            hi = mid
        else:
            lo = mid
    raise SolverError("target-unreachable: bisection did not meet the tolerance")
