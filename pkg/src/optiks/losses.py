"""Objective terms on a gradient waveform and their analytic cotangents.

Every term maps ``(Waveform, T)`` to a scalar and reports the derivative of
that scalar with respect to the gradient samples, the slew samples and the
duration. :func:`assemble_loss` weights and sums the active terms.

Spectra use the unnormalized one-sided DFT of each axis, zero-padded to a
power of two with bin spacing of at most 5 Hz. Interior bins are counted
twice so the band power equals the two-sided Frobenius norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.fft as sfft


class LossError(ValueError):
    pass


# ---------------------------------------------------------------------------
# leaky log-barrier


@dataclass(frozen=True)
class BarrierConfig:
    x_max: float
    delta: float

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise LossError(f"barrier delta must be positive, got {self.delta}")
        if self.x_max > 0 and not self.delta < self.x_max:
            raise LossError("barrier delta must be smaller than the limit")

    @property
    def x_delta(self) -> float:
        return self.x_max - self.delta


def _barrier_parts(x, cfg: BarrierConfig):
    x = np.asarray(x, dtype=float)
    inner = x <= cfg.x_delta
    # measured from x_delta so both branches agree exactly at the switch
    gap = np.where(inner, cfg.delta + (cfg.x_delta - x), 1.0)
    val = np.where(inner, -np.log(gap), (x - cfg.x_delta) / cfg.delta - np.log(cfg.delta))
    grad = np.where(inner, 1.0 / gap, 1.0 / cfg.delta)
    return val, grad


def leaky_log_barrier(x, cfg: BarrierConfig) -> float:
    """``sum(-ln(x_max - x))`` below ``x_max - delta``, continued linearly above."""
    return float(np.sum(_barrier_parts(x, cfg)[0]))


def leaky_log_barrier_grad(x, cfg: BarrierConfig):
    """Barrier value and its elementwise derivative."""
    val, grad = _barrier_parts(x, cfg)
    return float(np.sum(val)), grad


# ---------------------------------------------------------------------------
# weights and data records


@dataclass(frozen=True)
class LossWeights:
    lambda_time: float = 0.0
    lambda_bound_time: float = 0.0
    lambda_slew: float = 0.0
    lambda_pns: float = 0.0
    lambda_band: float = 0.0
    lambda_acoustic: float = 0.0

    def __post_init__(self):
        vals = self.as_dict()
        for k, v in vals.items():
            if not (np.isfinite(v) and v >= 0):
                raise LossError(f"{k} must be a nonnegative number, got {v}")
        if not any(v > 0 for v in vals.values()):
            raise LossError("no-active-terms: every loss weight is zero")
        if (self.lambda_time > 0 or self.lambda_bound_time > 0) and self.lambda_slew <= 0:
            raise LossError("lambda_slew must be positive when a time term is active")

    def as_dict(self) -> dict:
        return {
            "time": self.lambda_time,
            "bound_time": self.lambda_bound_time,
            "slew": self.lambda_slew,
            "pns": self.lambda_pns,
            "band": self.lambda_band,
            "acoustic": self.lambda_acoustic,
        }

    @classmethod
    def per_raster(cls, dt: float, **raster_weights) -> "LossWeights":
        """Weights quoted for a time term measured in raster periods.

        ``lambda_time * T/dt + lambda_slew * sum(...)`` equals ``1/dt`` times
        ``lambda_time * T + dt*lambda_slew * sum(...)``, so every per-sample
        term is scaled by ``dt`` to express the same balance with T in seconds.
        """
        out = {}
        for k, v in raster_weights.items():
            name = k if k.startswith("lambda_") else f"lambda_{k}"
            out[name] = v if name in ("lambda_time", "lambda_bound_time") else v * dt
        return cls(**out)


@dataclass(frozen=True)
class BandSet:
    """Union of closed frequency intervals in Hz, sorted and merged."""

    bands: tuple = ()

    def __post_init__(self):
        items = sorted((float(lo), float(hi)) for lo, hi in self.bands)
        for lo, hi in items:
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 <= lo < hi):
                raise LossError(f"invalid band ({lo}, {hi}): need 0 <= f_lo < f_hi")
        merged: list = []
        for lo, hi in items:
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        object.__setattr__(self, "bands", tuple(merged))

    def __len__(self) -> int:
        return len(self.bands)

    def __iter__(self):
        return iter(self.bands)

    def check_nyquist(self, dt: float) -> None:
        if self.bands and self.bands[-1][1] > 0.5 / dt:
            raise LossError(f"band edge {self.bands[-1][1]} Hz above Nyquist {0.5 / dt} Hz")

    def mask(self, freqs: np.ndarray) -> np.ndarray:
        m = np.zeros(freqs.shape, dtype=bool)
        for lo, hi in self.bands:
            m |= (freqs >= lo) & (freqs <= hi)
        return m


@dataclass(frozen=True)
class Atf:
    """Per-axis acoustic magnitude response sampled on ``freqs``.

    ``mags`` is (F, D); NaN marks bins without usable measurement data.
    """

    freqs: np.ndarray
    mags: np.ndarray
    ref_hz: float = 1000.0
    scales: Optional[np.ndarray] = None

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=float)
        a = np.asarray(self.mags, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if f.ndim != 1 or a.shape[0] != f.size:
            raise LossError("ATF frequency grid and magnitudes disagree in length")
        if f.size < 1 or np.any(np.diff(f) <= 0) or not np.all(np.isfinite(f)):
            raise LossError("ATF frequency grid must be finite and increasing")
        if np.any(a[np.isfinite(a)] < 0) or np.any(np.isinf(a)):
            raise LossError("ATF magnitudes must be nonnegative")
        object.__setattr__(self, "freqs", f)
        object.__setattr__(self, "mags", a)
        if self.scales is not None:
            s = np.asarray(self.scales, dtype=float).reshape(-1)
            if s.size != a.shape[1]:
                raise LossError("one ATF scale per axis expected")
            object.__setattr__(self, "scales", s)

    @property
    def axes(self) -> int:
        return self.mags.shape[1]

    def magnitude_at(self, f: np.ndarray) -> np.ndarray:
        """Magnitudes at ``f`` (n, D); missing bins filled from neighbours."""
        out = np.empty((np.size(f), self.axes))
        for i in range(self.axes):
            ok = np.isfinite(self.mags[:, i])
            if not np.any(ok):
                raise LossError(f"ATF axis {i} has no usable bins")
            out[:, i] = np.interp(f, self.freqs[ok], self.mags[ok, i])
        return out


# ---------------------------------------------------------------------------
# spectra


def dft_length(n_t: int, dt: float, max_spacing: float = 5.0) -> int:
    """Smallest power of two covering ``n_t`` samples with bins ``<= max_spacing`` Hz."""
    need = max(n_t, int(np.ceil(1.0 / (max_spacing * dt))))
    return 1 << int(np.ceil(np.log2(need)))


def dft_freqs(nfft: int, dt: float) -> np.ndarray:
    return np.arange(nfft // 2 + 1) / (nfft * dt)


def _bin_weights(nfft: int) -> np.ndarray:
    w = np.full(nfft // 2 + 1, 2.0)
    w[0] = 1.0
    if nfft % 2 == 0:
        w[-1] = 1.0
    return w


def _spectrum(g: np.ndarray, dt: float):
    nfft = dft_length(g.shape[0], dt)
    return sfft.rfft(g, nfft, axis=0), nfft


def _weighted_power(g: np.ndarray, dt: float, per_bin: np.ndarray):
    """``sum_k w_k per_bin[k] |G_k|^2`` and its gradient with respect to ``g``."""
    G, nfft = _spectrum(g, dt)
    bw = _bin_weights(nfft)
    if per_bin.ndim == 1:
        per_bin = per_bin[:, None]
    value = float(np.sum(bw[:, None] * per_bin * (G.real ** 2 + G.imag ** 2)))
    cot = 2.0 * nfft * sfft.irfft(per_bin * G, nfft, axis=0)[: g.shape[0]]
    return value, cot


def band_power_grad(w, bands: BandSet):
    if len(bands) == 0:
        raise LossError("empty-band-set")
    bands.check_nyquist(w.dt)
    nfft = dft_length(w.n_t, w.dt)
    mask = bands.mask(dft_freqs(nfft, w.dt)).astype(float)
    return _weighted_power(w.g, w.dt, mask)


def band_power_loss(w, bands: BandSet) -> float:
    """Squared norm of the waveform spectrum restricted to ``bands``."""
    return band_power_grad(w, bands)[0]


def acoustic_grad(w, atf: Atf):
    if atf.axes != w.axes:
        raise LossError(f"axis-count-mismatch: ATF has {atf.axes} axes, waveform {w.axes}")
    nfft = dft_length(w.n_t, w.dt)
    amp = atf.magnitude_at(dft_freqs(nfft, w.dt))
    return _weighted_power(w.g, w.dt, amp * amp)


def acoustic_loss(w, atf: Atf) -> float:
    """Squared norm of the ATF-weighted spectrum, summed over axes."""
    return acoustic_grad(w, atf)[0]


# ---------------------------------------------------------------------------
# time-domain terms


def duration_terms(T: float, weights: LossWeights, t_max: Optional[float] = None,
                   delta: Optional[float] = None) -> float:
    return duration_terms_grad(T, weights, t_max, delta)[0]


def duration_terms_grad(T: float, weights: LossWeights, t_max: Optional[float] = None,
                        delta: Optional[float] = None):
    if not T > 0:
        raise LossError("duration must be positive")
    value = weights.lambda_time * T
    grad = weights.lambda_time
    if weights.lambda_bound_time > 0:
        if t_max is None or not t_max > 0:
            raise LossError("bound-time term needs a positive t_max")
        cfg = BarrierConfig(t_max, 1e-4 * t_max if delta is None else delta)
        b, db = leaky_log_barrier_grad(T, cfg)
        value += weights.lambda_bound_time * b
        grad += weights.lambda_bound_time * float(db)
    return value, grad


def slew_norm(w) -> np.ndarray:
    return np.linalg.norm(w.slew, axis=1)


def slew_barrier_grad(w, cfg: BarrierConfig):
    s = w.slew
    norm = np.linalg.norm(s, axis=1)
    value, d = leaky_log_barrier_grad(norm, cfg)
    safe = np.where(norm > 0, norm, 1.0)
    cot = (d / safe)[:, None] * s
    return value, cot


def slew_barrier(w, hw, cfg: BarrierConfig) -> float:
    """Leaky barrier on the per-sample slew norm, summed over the raster."""
    if cfg.x_max != hw.s_max:
        raise LossError("slew barrier limit must equal the hardware s_max")
    return slew_barrier_grad(w, cfg)[0]


# ---------------------------------------------------------------------------
# assembly


@dataclass
class TermEval:
    value: float
    cot_g: Optional[np.ndarray] = None
    cot_slew: Optional[np.ndarray] = None
    cot_T: float = 0.0


class TimeTerm:
    def __call__(self, w, T):
        return TermEval(float(T), cot_T=1.0)


@dataclass(frozen=True)
class BoundTimeTerm:
    t_max: float
    delta: Optional[float] = None

    def __call__(self, w, T):
        cfg = BarrierConfig(self.t_max, 1e-4 * self.t_max if self.delta is None else self.delta)
        v, d = leaky_log_barrier_grad(T, cfg)
        return TermEval(v, cot_T=float(d))


@dataclass(frozen=True)
class SlewTerm:
    cfg: BarrierConfig

    def __call__(self, w, T):
        v, c = slew_barrier_grad(w, self.cfg)
        return TermEval(v, cot_slew=c)


@dataclass(frozen=True)
class PnsTerm:
    model: object
    cfg: BarrierConfig

    def __call__(self, w, T):
        p = self.model.response(w.slew, w.dt)
        v, d = leaky_log_barrier_grad(p, self.cfg)
        return TermEval(v, cot_slew=self.model.response_vjp(w.slew, w.dt, d))


@dataclass(frozen=True)
class BandTerm:
    bands: BandSet

    def __call__(self, w, T):
        v, c = band_power_grad(w, self.bands)
        return TermEval(v, cot_g=c)


@dataclass(frozen=True)
class AcousticTerm:
    atf: Atf

    def __call__(self, w, T):
        v, c = acoustic_grad(w, self.atf)
        return TermEval(v, cot_g=c)


@dataclass
class LossValue:
    total: float
    terms: dict = field(default_factory=dict)
    cot_g: Optional[np.ndarray] = None
    cot_slew: Optional[np.ndarray] = None
    cot_T: float = 0.0


def assemble_loss(w, T: float, terms: Mapping[str, object], weights: LossWeights) -> LossValue:
    """Weighted sum of the terms whose weight is positive.

    ``terms`` maps the weight names of :class:`LossWeights` (``time``,
    ``bound_time``, ``slew``, ``pns``, ``band``, ``acoustic``) to callables
    ``term(w, T) -> TermEval``. ``LossValue.terms`` holds unweighted values.
    """
    lam = weights.as_dict()
    unknown = set(terms) - set(lam)
    if unknown:
        raise LossError(f"unknown loss terms {sorted(unknown)}")
    active = [k for k in lam if lam[k] > 0 and k in terms]
    if not active:
        raise LossError("no-active-terms")
    cot_g = np.zeros_like(w.g)
    cot_s = np.zeros_like(w.slew)
    out = LossValue(0.0, {}, cot_g, cot_s, 0.0)
    for k in active:
        ev = terms[k](w, T)
        out.terms[k] = ev.value
        out.total += lam[k] * ev.value
        if ev.cot_g is not None:
            cot_g += lam[k] * ev.cot_g
        if ev.cot_slew is not None:
            cot_s += lam[k] * ev.cot_slew
        out.cot_T += lam[k] * ev.cot_T
    return out


def required_terms(weights: LossWeights) -> Sequence[str]:
    return [k for k, v in weights.as_dict().items() if v > 0]
