"""Smoothing, R-peak detection, prominence peak picking and beat spans."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

REFRACTORY_S = 0.200
REFINE_S = 0.050
INTEGRATION_S = 0.150


@dataclass(frozen=True)
class BeatSpan:
    start: int
    end_exclusive: int


def window_length(fs_hz: float, window_ms: float) -> int:
    """Samples in a ``window_ms`` window, rounded and forced odd."""
    w = int(round(window_ms * fs_hz / 1000.0))
    if w < 1:
        raise ValueError(f"window of {window_ms} ms at {fs_hz} Hz is shorter than one sample")
    return w if w % 2 == 1 else w + 1


def moving_average_w(x: np.ndarray, w: int) -> np.ndarray:
    """Centred moving mean along the last axis with odd window ``w``; edges shrink."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("moving_average of an empty vector")
    if w == 1:
        return x.copy()
    h = w // 2
    c = np.zeros(x.shape[:-1] + (n + 1,))
    np.cumsum(x, axis=-1, out=c[..., 1:])
    idx = np.arange(n)
    lo = np.maximum(idx - h, 0)
    hi = np.minimum(idx + h + 1, n)
    return (c[..., hi] - c[..., lo]) / (hi - lo)


def moving_average(x, fs_hz: float, window_ms: float) -> np.ndarray:
    return moving_average_w(x, window_length(fs_hz, window_ms))


def moving_average_matrix(n: int, w: int) -> np.ndarray:
    """Dense operator M with moving_average_w(x, w) == M @ x; used for gradients."""
    h = w // 2
    idx = np.arange(n)
    lo = np.maximum(idx - h, 0)
    hi = np.minimum(idx + h + 1, n)
    cols = np.arange(n)
    m = ((cols[None, :] >= lo[:, None]) & (cols[None, :] < hi[:, None])).astype(np.float64)
    return m / (hi - lo)[:, None]


def _biquad_coeffs(fs: float, f0: float, kind: str):
    w0 = 2.0 * math.pi * f0 / fs
    alpha = math.sin(w0) / (2.0 * math.sqrt(0.5))
    cw = math.cos(w0)
    if kind == "low":
        b = ((1 - cw) / 2, 1 - cw, (1 - cw) / 2)
    else:
        b = ((1 + cw) / 2, -(1 + cw), (1 + cw) / 2)
    a0 = 1 + alpha
    return b[0] / a0, b[1] / a0, b[2] / a0, (-2 * cw) / a0, (1 - alpha) / a0


def _filtfilt(x, coeffs):
    y = _kernels.iir2(x, *coeffs)
    return _kernels.iir2(y[::-1].copy(), *coeffs)[::-1].copy()


def bandpass(x: np.ndarray, fs_hz: float, low_hz: float = 5.0, high_hz: float = 15.0) -> np.ndarray:
    """Zero-phase cascade of a second-order high-pass and low-pass section."""
    y = np.ascontiguousarray(x, dtype=np.float64)
    if high_hz < fs_hz / 2:
        y = _filtfilt(y, _biquad_coeffs(fs_hz, high_hz, "low"))
    return _filtfilt(y, _biquad_coeffs(fs_hz, low_hz, "high"))


def _derivative(x: np.ndarray) -> np.ndarray:
    # centred five-point slope (-x[n-2] - 2x[n-1] + 2x[n+1] + x[n+2]) / 8
    p = np.pad(x, 2, mode="edge")
    return (-p[:-4] - 2 * p[1:-3] + 2 * p[3:-1] + p[4:]) / 8.0


def pan_tompkins(x, fs_hz: float) -> np.ndarray:
    """R-peak sample indices (strictly increasing) of a single lead."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("pan_tompkins expects a single lead")
    if x.shape[0] < 2 * fs_hz:
        raise ValueError(f"pan_tompkins needs at least 2 s of signal, got {x.shape[0]} samples at {fs_hz} Hz")
    if not np.any(x - x[0]):
        return np.empty(0, dtype=np.int64)
    d = _derivative(bandpass(x, fs_hz))
    m = moving_average_w(d * d, window_length(fs_hz, INTEGRATION_S * 1000.0))
    refractory = int(round(REFRACTORY_S * fs_hz))
    cand = _kernels.dominant(m, _kernels.rising_maxima(m), refractory)
    det = _kernels.pt_decide(m, cand, float(fs_hz), refractory)
    if det.shape[0] == 0:
        return det
    return _kernels.refine_peaks(x, det, int(round(REFINE_S * fs_hz)), refractory)


def detect_rpeaks(data: np.ndarray, fs_hz: float, lead: int = 0) -> np.ndarray:
    """Pan-Tompkins on the reference lead of a C x T array."""
    return pan_tompkins(np.asarray(data)[lead], fs_hz)


def prominence(x, peaks) -> np.ndarray:
    return _kernels.prominences(np.ascontiguousarray(x, dtype=np.float64),
                                np.ascontiguousarray(peaks, dtype=np.int64))


def prominent_peaks(x, min_prominence: float) -> np.ndarray:
    """Strict local maxima whose topographic prominence is at least ``min_prominence``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    cand = _kernels.strict_local_maxima(x)
    if cand.shape[0] == 0:
        return cand
    prom = _kernels.prominences(x, cand)
    return cand[prom >= min_prominence]


def beat_spans(r) -> list[BeatSpan]:
    r = [int(v) for v in r]
    return [BeatSpan(a, b) for a, b in zip(r[:-1], r[1:])]
