"""Sequential inner loops shared by the DSP and loss code.

Every function here is a plain loop over 1-D float64/int64 arrays so the same
source compiles under numba or runs uncompiled (see ``_accel``).
"""

from __future__ import annotations

import numpy as np

from ._accel import jit


@jit
def iir2(x, b0, b1, b2, a1, a2):
    """Direct-form I biquad, state initialised at the steady state of x[0]."""
    n = x.shape[0]
    y = np.empty(n)
    if n == 0:
        return y
    x0 = x[0]
    gain = (b0 + b1 + b2) / (1.0 + a1 + a2)
    xm1 = x0
    xm2 = x0
    ym1 = x0 * gain
    ym2 = x0 * gain
    for i in range(n):
        xi = x[i]
        yi = b0 * xi + b1 * xm1 + b2 * xm2 - a1 * ym1 - a2 * ym2
        y[i] = yi
        xm2 = xm1
        xm1 = xi
        ym2 = ym1
        ym1 = yi
    return y


@jit
def strict_local_maxima(x):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(1, n - 1):
        if x[i - 1] < x[i] and x[i] > x[i + 1]:
            out[k] = i
            k += 1
    return out[:k]


@jit
def rising_maxima(x):
    """Indices where x stops rising: x[i-1] < x[i] >= x[i+1] (first sample of a plateau)."""
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(1, n - 1):
        if x[i - 1] < x[i] and x[i] >= x[i + 1]:
            out[k] = i
            k += 1
    return out[:k]


@jit
def dominant(x, cand, radius):
    """Keep candidates that are the (first) maximum of x within +-radius."""
    n = x.shape[0]
    out = np.empty(cand.shape[0], dtype=np.int64)
    k = 0
    for j in range(cand.shape[0]):
        c = cand[j]
        v = x[c]
        keep = True
        for i in range(max(0, c - radius), min(n, c + radius + 1)):
            if x[i] > v or (x[i] == v and i < c):
                keep = False
                break
        if keep:
            out[k] = c
            k += 1
    return out[:k]


@jit
def prominences(x, peaks):
    """Topographic prominence of each index in ``peaks``.

    The base on each side is the minimum of x between the peak and the nearest
    strictly higher sample on that side (or the signal edge).
    """
    n = x.shape[0]
    out = np.empty(peaks.shape[0])
    for k in range(peaks.shape[0]):
        p = peaks[k]
        h = x[p]
        lmin = h
        i = p
        while i >= 0 and x[i] <= h:
            if x[i] < lmin:
                lmin = x[i]
            i -= 1
        rmin = h
        i = p
        while i < n and x[i] <= h:
            if x[i] < rmin:
                rmin = x[i]
            i += 1
        out[k] = h - max(lmin, rmin)
    return out


@jit
def pt_decide(m, cand, fs, refractory):
    """Adaptive dual-threshold decision over integrator candidates.

    Running estimates use the 0.125/0.875 weights and threshold
    noise + 0.25 * (signal - noise); the search-back threshold is half of it
    and fires when no beat was accepted for 1.66 average RR intervals.
    """
    n = m.shape[0]
    nc = cand.shape[0]
    out = np.empty(nc, dtype=np.int64)
    vals = np.empty(nc)
    if nc == 0:
        return out
    learn = min(n, int(2.0 * fs))
    top = 0.0
    acc = 0.0
    for i in range(learn):
        acc += m[i]
        if m[i] > top:
            top = m[i]
    spki = 0.25 * top
    npki = 0.5 * acc / learn
    th1 = npki + 0.25 * (spki - npki)
    rr = np.zeros(8, dtype=np.int64)
    n_rr = 0
    n_out = 0
    last = -1
    for k in range(nc):
        i = cand[k]
        v = m[i]
        if n_out > 0 and n_rr > 0:
            cnt = min(n_rr, 8)
            rr_avg = 0.0
            for q in range(cnt):
                rr_avg += rr[q]
            rr_avg /= cnt
            if i - last > 1.66 * rr_avg:
                best = -1
                bv = 0.0
                for j in range(k - 1, -1, -1):
                    c = cand[j]
                    if c <= last + refractory:
                        break
                    if m[c] > 0.5 * th1 and m[c] > bv:
                        best = c
                        bv = m[c]
                if best >= 0:
                    rr[n_rr % 8] = best - last
                    n_rr += 1
                    out[n_out] = best
                    vals[n_out] = bv
                    n_out += 1
                    last = best
                    spki = 0.25 * bv + 0.75 * spki
                    th1 = npki + 0.25 * (spki - npki)
        if v > th1:
            if n_out > 0 and i - last < refractory:
                if v > vals[n_out - 1]:
                    if n_rr > 0:
                        rr[(n_rr - 1) % 8] += i - last
                    out[n_out - 1] = i
                    vals[n_out - 1] = v
                    last = i
                continue
            if n_out > 0:
                rr[n_rr % 8] = i - last
                n_rr += 1
            out[n_out] = i
            vals[n_out] = v
            n_out += 1
            last = i
            spki = 0.125 * v + 0.875 * spki
        else:
            npki = 0.125 * v + 0.875 * npki
        th1 = npki + 0.25 * (spki - npki)
    return out[:n_out]


@jit
def refine_peaks(x, det, half_window, refractory):
    """Move each detection to argmax |x| within +-half_window, then drop
    detections closer than ``refractory`` to a kept one, keeping the larger."""
    n = x.shape[0]
    ref = np.empty(det.shape[0], dtype=np.int64)
    for k in range(det.shape[0]):
        lo = max(0, det[k] - half_window)
        hi = min(n, det[k] + half_window + 1)
        best = lo
        bv = abs(x[lo])
        for i in range(lo + 1, hi):
            if abs(x[i]) > bv:
                bv = abs(x[i])
                best = i
        ref[k] = best
    ref = np.sort(ref)
    out = np.empty(ref.shape[0], dtype=np.int64)
    n_out = 0
    for k in range(ref.shape[0]):
        i = ref[k]
        if n_out > 0 and i - out[n_out - 1] < refractory:
            if abs(x[i]) > abs(x[out[n_out - 1]]):
                out[n_out - 1] = i
            continue
        out[n_out] = i
        n_out += 1
    return out[:n_out]
