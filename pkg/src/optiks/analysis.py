"""Verification and reporting: limits, spectra, k-space fidelity, ATF fits,
probe waveforms and point-spread simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ArcCurve, HardwareLimits
from .losses import Atf, BandSet, _bin_weights, band_power_loss, dft_freqs, dft_length, slew_norm
from .pipeline import Waveform, interp_linear

LIMIT_TOL = 1e-3


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# limits


@dataclass(frozen=True)
class LimitCheck:
    name: str
    value: float
    limit: float

    @property
    def percent(self) -> float:
        """Value as a percentage of the limit."""
        return 100.0 * self.value / self.limit

    @property
    def passed(self) -> bool:
        return self.value <= self.limit * (1.0 + LIMIT_TOL)


@dataclass(frozen=True)
class LimitReport:
    max_grad: float
    max_slew: float
    max_pns: Optional[float]
    duration: float
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> LimitCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def table(self) -> str:
        rows = [f"duration_s {self.duration:.9g}"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            rows.append(f"{c.name} {c.value:.9g} limit {c.limit:.9g} {c.percent:.3f}% {status}")
        return "\n".join(rows)


def verify_limits(w: Waveform, hw: HardwareLimits, pns_model=None,
                  p_max: Optional[float] = None, t_max: Optional[float] = None) -> LimitReport:
    gmax = float(np.max(np.linalg.norm(w.g, axis=1)))
    smax = float(np.max(slew_norm(w))) if w.n_t > 1 else 0.0
    checks = [LimitCheck("gradient", gmax, hw.g_max), LimitCheck("slew", smax, hw.s_max)]
    pmax = None
    if pns_model is not None:
        pmax = float(np.max(pns_model.response(w.slew, w.dt)))
        if p_max is not None:
            checks.append(LimitCheck("pns", pmax, p_max))
    if t_max is not None:
        checks.append(LimitCheck("duration", w.duration, t_max))
    return LimitReport(gmax, smax, pmax, w.duration, tuple(checks))


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class SpectrumReport:
    freqs: np.ndarray
    magnitude: np.ndarray  # (F, D), |G| of the one-sided DFT
    nfft: int
    total_power: float
    bands: tuple = ()
    band_power: tuple = ()

    @property
    def in_band_power(self) -> float:
        return float(sum(self.band_power))


def power_spectrum(w: Waveform, bands: Optional[BandSet] = None, pad: str | int = "default") -> SpectrumReport:
    """Padded DFT magnitudes and band powers, two-sided normalization.

    ``pad`` is ``"default"`` (the loss rule), ``"none"`` or an explicit length.
    """
    if w.n_t < 4:
        raise AnalysisError("spectrum needs at least 4 samples")
    if pad == "default":
        nfft = dft_length(w.n_t, w.dt)
    elif pad == "none":
        nfft = w.n_t
    else:
        nfft = int(pad)
        if nfft < w.n_t:
            raise AnalysisError("DFT length shorter than the waveform")
    G = np.fft.rfft(w.g, nfft, axis=0)
    total = float(np.sum(_bin_weights(nfft)[:, None] * np.abs(G) ** 2))
    bl, bp = (), ()
    if bands is not None and len(bands):
        bl = tuple(bands)
        if pad == "default":
            bp = tuple(band_power_loss(w, BandSet((b,))) for b in bl)
        else:
            f = dft_freqs(nfft, w.dt)
            bw = _bin_weights(nfft)
            bp = tuple(float(np.sum((bw * BandSet((b,)).mask(f))[:, None] * np.abs(G) ** 2)) for b in bl)
    return SpectrumReport(dft_freqs(nfft, w.dt), np.abs(G), nfft, total, bl, bp)


# ---------------------------------------------------------------------------
# fidelity


def integrate_waveform(w: Waveform, start: np.ndarray, gamma_bar: float) -> np.ndarray:
    """k-space positions reached at each raster instant by summing ``g``."""
    c = np.empty_like(w.g)
    c[0] = start
    c[1:] = start + gamma_bar * w.dt * np.cumsum(w.g[:-1], axis=0)
    return c


def _distance_to_polyline(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    if poly.shape[0] == 1:
        return np.linalg.norm(pts - poly[0], axis=1)
    _, j = cKDTree(poly).query(pts)
    best = np.linalg.norm(pts - poly[j], axis=1)
    for a_idx in (j - 1, j):
        a_idx = np.clip(a_idx, 0, poly.shape[0] - 2)
        a, b = poly[a_idx], poly[a_idx + 1]
        ab = b - a
        den = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
        u = np.clip(np.sum((pts - a) * ab, axis=1) / den, 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(pts - (a + u[:, None] * ab), axis=1))
    return best


def kspace_fidelity(w: Waveform, arc: ArcCurve, gamma_bar: float,
                    s_of_t: Optional[np.ndarray] = None):
    """Max and RMS distance between the integrated waveform and the curve.

    With ``s_of_t`` the comparison is against the curve position scheduled
    for each raster instant; without it, against the nearest curve point.
    """
    rec = integrate_waveform(w, arc.positions[0], gamma_bar)
    if s_of_t is not None:
        if len(s_of_t) != w.n_t:
            raise AnalysisError("s(t) length differs from the waveform")
        ref, _ = interp_linear(arc.s_grid, arc.positions, np.clip(s_of_t, 0.0, arc.length))
        dev = np.linalg.norm(rec - ref, axis=1)
    else:
        dev = _distance_to_polyline(rec, arc.positions)
    return float(np.max(dev)), float(np.sqrt(np.mean(dev ** 2)))


# ---------------------------------------------------------------------------
# acoustic transfer function fits


@dataclass(frozen=True)
class AtfFit:
    atf: Atf
    response: np.ndarray  # complex (F, D), before scaling; NaN where missing


def fit_atf(freqs: np.ndarray, pairs: Sequence[Sequence[tuple]], ref_hz: float = 1000.0,
            ref_scale: Optional[Sequence[Optional[float]]] = None,
            rel_threshold: float = 1e-12) -> AtfFit:
    """Per-bin least-squares transfer function ``sum(conj(I) O) / sum(|I|^2)``.

    ``pairs[i]`` lists the ``(I, O)`` input/output spectra recorded for axis
    ``i``. Bins where the input energy is below ``rel_threshold`` times its
    maximum are marked missing (NaN). ``ref_scale[i]``, when given, rescales
    axis ``i`` so that its magnitude at ``ref_hz`` equals that measurement.
    """
    f = np.asarray(freqs, dtype=float)
    if len(pairs) == 0:
        raise AnalysisError("fit needs at least one axis")
    cols, mags, scales = [], [], []
    for i, axis_pairs in enumerate(pairs):
        if len(axis_pairs) == 0:
            raise AnalysisError(f"axis {i} has no input/output pairs")
        num = np.zeros(f.size, dtype=complex)
        den = np.zeros(f.size)
        for I, O in axis_pairs:
            I = np.asarray(I, dtype=complex)
            O = np.asarray(O, dtype=complex)
            if I.shape != f.shape or O.shape != f.shape:
                raise AnalysisError("spectra must share the frequency grid")
            num += np.conj(I) * O
            den += (I.real ** 2 + I.imag ** 2)
        ok = den > rel_threshold * max(np.max(den), 0.0)
        A = np.full(f.size, np.nan + 0j)
        A[ok] = num[ok] / den[ok]
        mag = np.abs(A)
        scale = 1.0
        rs = None if ref_scale is None else ref_scale[i]
        if rs is not None:
            good = np.isfinite(mag)
            if not np.any(good):
                raise AnalysisError(f"axis {i} has no usable bins")
            at_ref = float(np.interp(ref_hz, f[good], mag[good]))
            if not at_ref > 0:
                raise AnalysisError(f"axis {i} has zero response at the reference frequency")
            scale = float(rs) / at_ref
        cols.append(A)
        mags.append(mag * scale)
        scales.append(scale)
    return AtfFit(Atf(f, np.column_stack(mags), ref_hz, np.array(scales)), np.column_stack(cols))


def merge_atf(*atfs: Atf) -> Atf:
    """Pointwise maximum of ATFs on a common grid (missing bins ignored)."""
    if not atfs:
        raise AnalysisError("nothing to merge")
    f = atfs[0].freqs
    for a in atfs[1:]:
        if a.freqs.shape != f.shape or np.any(a.freqs != f) or a.axes != atfs[0].axes:
            raise AnalysisError("ATFs must share frequency grid and axes")
    stack = np.stack([a.mags for a in atfs])
    with np.errstate(invalid="ignore"):
        all_nan = np.all(np.isnan(stack), axis=0)
        merged = np.where(all_nan, np.nan, np.nanmax(np.where(np.isnan(stack), -np.inf, stack), axis=0))
    return Atf(f, merged, atfs[0].ref_hz, None)


# ---------------------------------------------------------------------------
# probe waveforms


def probe_frequencies(f_lo: float = 50.0, f_hi: float = 2000.0, step: float = 10.0) -> np.ndarray:
    count = int(np.floor((f_hi - f_lo) / step + 1e-9)) + 1
    return f_lo + step * np.arange(count)


def gen_probe_waveforms(axis: int = 0, axes: int = 3, f_lo: float = 50.0, f_hi: float = 2000.0,
                        step: float = 10.0, dur: float = 0.12, amplitude: float = 0.005,
                        dt: float = 4e-6, tail: float = 0.02) -> list:
    """Single-axis sinusoids for transfer-function measurements.

    Each waveform plays ``round(dur/dt)`` samples of a sine on ``axis``
    followed by a zero tail of ``tail`` seconds for ring-down.
    """
    if not 0 <= axis < axes:
        raise AnalysisError("axis index out of range")
    if not (0 < f_lo <= f_hi and step > 0 and dur > 0 and dt > 0 and tail >= 0):
        raise AnalysisError("invalid probe parameters")
    if f_hi >= 0.5 / dt:
        raise AnalysisError(f"nyquist-violation: {f_hi} Hz at dt={dt}")
    n_on = int(round(dur / dt))
    n_tail = int(round(tail / dt))
    t = np.arange(n_on) * dt
    out = []
    for f in probe_frequencies(f_lo, f_hi, step):
        g = np.zeros((n_on + n_tail, axes))
        g[:n_on, axis] = amplitude * np.sin(2 * np.pi * f * t)
        out.append(Waveform(g, dt))
    return out


# ---------------------------------------------------------------------------
# point-spread function


@dataclass(frozen=True)
class PsfResult:
    image: np.ndarray  # complex (grid, grid), x along axis 0
    coords: np.ndarray  # pixel centres in m
    fwhm: tuple  # (x, y) in m


def density_weights(k: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Radial density compensation ``|g| |sin(angle(g) - angle(k))|``.

    Reduces to ``|k|`` weighting for a constant-speed Archimedean spiral and
    also accounts for the speed variation of a designed waveform.
    """
    kz = k[:, 0] + 1j * k[:, 1]
    gz = g[:, 0] + 1j * g[:, 1]
    return np.abs(gz) * np.abs(np.sin(np.angle(gz) - np.angle(kz)))


def fwhm_1d(profile: np.ndarray, coords: np.ndarray) -> float:
    mag = np.abs(profile)
    c = int(np.argmax(mag))
    half = 0.5 * mag[c]
    right = c
    while right + 1 < mag.size and mag[right + 1] >= half:
        right += 1
    left = c
    while left - 1 >= 0 and mag[left - 1] >= half:
        left -= 1
    if right + 1 >= mag.size or left - 1 < 0:
        return float("nan")

    def cross(i, j):
        return coords[i] + (half - mag[i]) * (coords[j] - coords[i]) / (mag[j] - mag[i])

    return float(cross(right, right + 1) - cross(left, left - 1))


def psf_simulate(w: Waveform, gamma_bar: float, t2star: float = np.inf, off_res_hz: float = 0.0,
                 grid: int = 128, pixel: Optional[float] = None, start=None,
                 chunk: int = 4096) -> PsfResult:
    """Conjugate-phase PSF of a 2D waveform by direct summation."""
    if w.axes != 2:
        raise AnalysisError("non-2d-trajectory")
    if not 4 <= grid <= 256:
        raise AnalysisError("grid must be between 4 and 256")
    k = integrate_waveform(w, np.zeros(2) if start is None else np.asarray(start, float), gamma_bar)
    t = np.arange(w.n_t) * w.dt
    dcf = density_weights(k, w.g)
    weight = dcf * np.exp(-t / t2star) * np.exp(-2j * np.pi * off_res_hz * t)
    if pixel is None:
        kmax = float(np.max(np.linalg.norm(k, axis=1)))
        pixel = 1.0 / (2.0 * kmax) / 8.0
    x = (np.arange(grid) - grid // 2) * pixel
    img = np.zeros((grid, grid), dtype=complex)
    for a in range(0, w.n_t, chunk):
        sl = slice(a, a + chunk)
        ex = np.exp(2j * np.pi * np.outer(x, k[sl, 0]))
        ey = np.exp(2j * np.pi * np.outer(k[sl, 1], x))
        img += (ex * weight[sl]) @ ey
    c = grid // 2
    return PsfResult(img, x, (fwhm_1d(img[:, c], x), fwhm_1d(img[c, :], x)))
