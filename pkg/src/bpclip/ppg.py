"""Pulse amplitude and heart rate from the projection-brightness series of one hold."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal

from .errors import SamplingTooSparse, TooShort

DEFAULT_PASSBAND = (0.5, 10.0)
MIN_DURATION_S = 3.0
MIN_RATE_HZ = 15.0
QUALITY_GOOD = "good"
QUALITY_POOR = "poor"


class FilteredSeries(NamedTuple):
    t: np.ndarray
    raw: np.ndarray
    filtered: np.ndarray
    fs: float


@dataclass(frozen=True)
class PulseMetrics:
    pulse_amplitude: float
    heart_rate_bpm: float
    n_beats: int
    quality: str
    mean_pressure: float
    ibi_cv: float = float("nan")
    # peak-to-trough span that in-band noise alone would produce
    noise_amplitude: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "pulse_amplitude": self.pulse_amplitude,
            "heart_rate_bpm": self.heart_rate_bpm,
            "n_beats": self.n_beats,
            "quality": self.quality,
            "mean_pressure": self.mean_pressure,
            "ibi_cv": self.ibi_cv,
            "noise_amplitude": self.noise_amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PulseMetrics":
        def num(key):
            v = d.get(key)
            return float("nan") if v is None else float(v)
        return cls(float(d["pulse_amplitude"]), num("heart_rate_bpm"), int(d["n_beats"]),
                   d["quality"], float(d["mean_pressure"]), num("ibi_cv"),
                   num("noise_amplitude"))


@dataclass(frozen=True)
class PulseParams:
    min_beats: int = 3
    max_ibi_cv: float = 0.25
    min_bpm: float = 20.0
    max_bpm: float = 240.0
    prominence_fraction: float = 0.25
    # minimum peak spacing as a fraction of the autocorrelation period
    period_spacing: float = 0.6


def detrend_bandpass(t, x, passband=DEFAULT_PASSBAND, order: int = 4) -> FilteredSeries:
    """Zero-phase band-pass of a brightness series after linear detrending.

    Irregularly stamped input (dropped frames) is first resampled onto a
    uniform grid at the median frame rate. The upper band edge is capped at
    45% of the sampling rate.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if t.size < 2 or t[-1] - t[0] < MIN_DURATION_S - 1e-9:
        raise TooShort(f"need at least {MIN_DURATION_S} s of samples")
    duration = t[-1] - t[0]
    fs = (t.size - 1) / duration
    if fs < MIN_RATE_HZ:
        raise SamplingTooSparse(f"effective rate {fs:.2f} Hz is below {MIN_RATE_HZ} Hz")

    dt = np.diff(t)
    step = float(np.median(dt))
    if np.max(np.abs(dt - step)) > 0.01 * step:
        fs = 1.0 / step
        grid = t[0] + np.arange(int(np.floor(duration / step + 1e-9)) + 1) * step
        x = np.interp(grid, t, x)
        t = grid

    lo, hi = passband
    hi = min(hi, 0.45 * fs)
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    y = signal.detrend(x, type="linear")
    y = signal.sosfiltfilt(sos, y, padlen=min(x.size - 1, int(3 * fs)))
    y = y - y.mean()
    return FilteredSeries(t, x, y, fs)


def _parabolic(y, idx):
    """Sub-sample vertex offset and value for samples at ``idx``."""
    idx = np.asarray(idx)
    inner = (idx > 0) & (idx < y.size - 1)
    offset = np.zeros(idx.size)
    value = y[idx].astype(float)
    i = idx[inner]
    a, b, c = y[i - 1], y[i], y[i + 1]
    denom = a - 2 * b + c
    safe = denom != 0
    off = np.zeros(i.size)
    off[safe] = 0.5 * (a[safe] - c[safe]) / denom[safe]
    offset[inner] = off
    value[inner] = b - 0.25 * (a - c) * off
    return offset, value


def noise_amplitude(raw, fs: float, passband=DEFAULT_PASSBAND) -> float:
    """Expected peak-to-trough span (4 SD) of white noise after band-passing.

    The raw noise SD comes from the median absolute second difference, which
    a smooth pulse waveform barely moves.
    """
    d2 = np.diff(np.asarray(raw, dtype=float), 2)
    if d2.size < 3:
        return float("nan")
    mad = float(np.median(np.abs(d2 - np.median(d2))))
    sd_raw = 1.4826 * mad / np.sqrt(6.0)
    lo, hi = passband
    hi = min(hi, 0.45 * fs)
    fraction = max(hi - lo, 0.0) / (0.5 * fs)
    return float(4.0 * sd_raw * np.sqrt(fraction))


def dominant_period(y, fs: float, min_bpm: float = 20.0, max_bpm: float = 240.0,
                    min_correlation: float = 0.3):
    """Beat period in seconds from the autocorrelation, or None if aperiodic.

    The shortest lag whose correlation reaches 85% of the best one wins, so a
    multiple of the period is not mistaken for it.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    lo = max(1, int(np.floor(fs * 60.0 / max_bpm)))
    hi = min(n - 2, int(np.ceil(fs * 60.0 / min_bpm)))
    if hi <= lo + 1:
        return None
    fx = np.fft.rfft(y, 2 * n)
    ac = np.fft.irfft(fx * np.conj(fx))[:n]
    if not ac[0] > 0:
        return None
    # unbiased normalisation so long lags are not penalised
    ac = ac / ac[0] * n / (n - np.arange(n))
    lags = np.arange(lo, hi + 1)
    seg = ac[lo:hi + 1]
    local = (seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])
    cand = lags[1:-1][local]
    if cand.size == 0:
        return None
    vals = ac[cand]
    best = vals.max()
    if best < min_correlation:
        return None
    k = int(cand[np.argmax(vals >= 0.85 * best)])
    off, _ = _parabolic(ac, np.array([k]))
    return float((k + off[0]) / fs)


def extract_pulse_metrics(series, mean_pressure: float, params: PulseParams | None = None,
                          passband=DEFAULT_PASSBAND) -> PulseMetrics:
    """Beat-level pulse amplitude (median peak-to-trough) and heart rate.

    ``series`` is a FilteredSeries or an ``(t, y)`` pair of a zero-mean
    filtered signal.
    """
    p = params or PulseParams()
    noise = float("nan")
    if isinstance(series, FilteredSeries):
        t, y, fs = series.t, series.filtered, series.fs
        noise = noise_amplitude(series.raw, fs, passband)
    else:
        t, y = (np.asarray(a, dtype=float) for a in series)
        fs = (t.size - 1) / (t[-1] - t[0])

    def poor(amplitude=0.0, hr=float("nan"), n=0, cv=float("nan")):
        return PulseMetrics(float(amplitude), float(hr), int(n), QUALITY_POOR,
                            float(mean_pressure), float(cv), noise)

    spread = float(np.percentile(y, 95) - np.percentile(y, 5))
    if not spread > 1e-12:
        return poor()

    distance = max(1, int(np.ceil(fs * 60.0 / p.max_bpm)))
    period = dominant_period(y, fs, p.min_bpm, p.max_bpm)
    if period is not None:
        # noise bumps within one beat must not count as beats
        distance = max(distance, int(p.period_spacing * period * fs))
    peaks, _ = signal.find_peaks(y, distance=distance, prominence=p.prominence_fraction * spread)
    if peaks.size == 0:
        return poor()
    if peaks.size == 1:
        return poor(y[peaks[0]] - y.min(), n=1)

    peak_off, peak_val = _parabolic(y, peaks)
    peak_t = np.interp(peaks + peak_off, np.arange(t.size), t)
    troughs = np.array([a + int(np.argmin(y[a:b + 1])) for a, b in zip(peaks[:-1], peaks[1:])])
    trough_val = -_parabolic(-y, troughs)[1]
    # the trough between two peaks is referenced to both of them, which
    # keeps the measure unchanged under time reversal
    amplitude = float(np.median(0.5 * (peak_val[:-1] + peak_val[1:]) - trough_val))

    ibi = np.diff(peak_t)
    hr = 60.0 / float(np.median(ibi))
    cv = float(np.std(ibi) / np.mean(ibi)) if ibi.size > 1 else 0.0
    n = int(peaks.size)
    good = n >= p.min_beats and cv <= p.max_ibi_cv and p.min_bpm <= hr <= p.max_bpm
    if not good:
        return poor(amplitude, hr, n, cv)
    return PulseMetrics(amplitude, hr, n, QUALITY_GOOD, float(mean_pressure), cv, noise)


def analyze_window(t, brightness, pressure, passband=DEFAULT_PASSBAND,
                   params: PulseParams | None = None) -> tuple[PulseMetrics, FilteredSeries]:
    """Filter one hold window and extract its metrics."""
    series = detrend_bandpass(t, brightness, passband)
    metrics = extract_pulse_metrics(series, float(np.mean(pressure)), params, passband)
    return metrics, series
