"""IEC-style peripheral nerve stimulation model.

The nerve response to slew is ``h(t) = alpha*c / (r*(c + t)**2)`` for
``t >= 0`` and the stimulation level is ``P(t) = 100*|(h * S)(t)|``, the norm
taken across gradient axes. Any model exposing ``response`` and
``response_vjp`` with the same signatures can replace :class:`PnsModel` in
the design loop.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .losses import BarrierConfig, leaky_log_barrier, leaky_log_barrier_grad


def fft_workers() -> int:
    try:
        return max(int(os.environ.get("OPTIKS_THREADS", "1")), 1)
    except ValueError:
        return 1


@dataclass(frozen=True)
class PnsModel:
    rheobase: float  # T/s
    chronaxie: float  # s
    coil_length: float  # m, effective coil length

    def __post_init__(self):
        for name in ("rheobase", "chronaxie", "coil_length"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"PNS model {name} must be positive, got {val}")

    def response(self, slew: np.ndarray, dt: float) -> np.ndarray:
        return pns_response_from_slew(slew, dt, self)

    def response_vjp(self, slew: np.ndarray, dt: float, cot_p: np.ndarray) -> np.ndarray:
        return _response_vjp(slew, dt, self, cot_p)


# Placeholder constants for examples and tests; real values are coil specific.
PLACEHOLDER_MODEL = PnsModel(rheobase=20.0, chronaxie=360e-6, coil_length=0.333)


def nerve_kernel(m: PnsModel, dt: float, n: int) -> np.ndarray:
    """Point samples ``h[k] = alpha*c / (r*(c + k*dt)**2)``, units (m/T)/s."""
    if n < 1:
        raise ValueError("kernel length must be >= 1")
    t = np.arange(n) * dt
    return m.coil_length * m.chronaxie / (m.rheobase * (m.chronaxie + t) ** 2)


def nerve_kernel_integrated(m: PnsModel, dt: float, n: int) -> np.ndarray:
    """``h`` integrated over each raster period, ``K[k] ~ h[k]*dt``.

    Convolving a piecewise-constant slew with this kernel reproduces the
    continuous convolution exactly at the raster instants.
    """
    t0 = np.arange(n) * dt
    c = m.chronaxie
    return (m.coil_length / m.rheobase) * c * dt / ((c + t0) * (c + t0 + dt))


def _conv_len(n: int) -> int:
    return sfft.next_fast_len(2 * n - 1, real=True)


def causal_convolve(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y[n] = sum_{m<=n} kernel[n-m] x[m]`` per column, via zero-padded FFT."""
    n = x.shape[0]
    nf = _conv_len(n)
    kf = sfft.rfft(kernel[:n], nf)
    xf = sfft.rfft(x, nf, axis=0, workers=fft_workers())
    y = sfft.irfft(xf * kf[:, None], nf, axis=0, workers=fft_workers())
    return y[:n]


def causal_correlate(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`causal_convolve`: ``z[m] = sum_{n>=m} kernel[n-m] x[n]``."""
    return causal_convolve(kernel, x[::-1])[::-1]


def direct_convolve(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    out = np.zeros_like(x, dtype=float)
    for k in range(n):
        out[k] = kernel[k::-1] @ x[: k + 1]
    return out


def _filtered(slew: np.ndarray, dt: float, m: PnsModel) -> np.ndarray:
    slew = np.asarray(slew, dtype=float)
    if slew.ndim == 1:
        slew = slew[:, None]
    return causal_convolve(nerve_kernel_integrated(m, dt, slew.shape[0]), slew)


def pns_response_from_slew(slew: np.ndarray, dt: float, m: PnsModel) -> np.ndarray:
    return 100.0 * np.linalg.norm(_filtered(slew, dt, m), axis=1)


def pns_response(w, m: PnsModel) -> np.ndarray:
    """Stimulation in percent of threshold, one value per slew sample."""
    if w.n_t < 2:
        raise ValueError("waveform needs at least 2 samples")
    return m.response(w.slew, w.dt)


def _response_vjp(slew, dt, m: PnsModel, cot_p):
    slew = np.asarray(slew, dtype=float)
    if slew.ndim == 1:
        slew = slew[:, None]
    filt = _filtered(slew, dt, m)
    norm = np.linalg.norm(filt, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    cot_f = 100.0 * (np.asarray(cot_p) / safe)[:, None] * filt
    cot_f[norm == 0] = 0.0
    kern = nerve_kernel_integrated(m, dt, slew.shape[0])
    return causal_correlate(kern, cot_f)


def pns_barrier(w, m: PnsModel, p_max: float, delta: float):
    """Leaky log-barrier on ``P(t)``; returns ``(value, d value / d slew)``."""
    if not p_max > 0:
        raise ValueError("p_max must be positive")
    cfg = BarrierConfig(p_max, delta)
    p = m.response(w.slew, w.dt)
    value, dval = leaky_log_barrier_grad(p, cfg)
    return value, m.response_vjp(w.slew, w.dt, dval)


def pns_barrier_value(w, m: PnsModel, p_max: float, delta: float) -> float:
    return leaky_log_barrier(pns_response(w, m), BarrierConfig(p_max, delta))
