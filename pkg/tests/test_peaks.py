import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import peak_prominences

from ecgssl.peaks import (BeatSpan, beat_spans, detect_rpeaks, moving_average, moving_average_w, pan_tompkins,
                          prominence, prominent_peaks, window_length)
from ecgssl.synth import RhythmClass, SynthSpec, random_spec, synth_segment


# ---- moving average --------------------------------------------------------------

def test_ma_constant():
    np.testing.assert_allclose(moving_average(np.full(40, 3.5), 500.0, 100.0), 3.5)


def test_ma_impulse():
    np.testing.assert_allclose(moving_average_w(np.array([0, 0, 1, 0, 0.0]), 3), [0, 1 / 3, 1 / 3, 1 / 3, 0])


def test_ma_identity_for_unit_window():
    x = np.random.default_rng(0).normal(size=17)
    assert window_length(1000.0, 1.0) == 1
    np.testing.assert_array_equal(moving_average(x, 1000.0, 1.0), x)


def test_ma_window_forced_odd():
    assert window_length(500.0, 100.0) == 51
    assert window_length(100.0, 100.0) == 11
    assert window_length(250.0, 100.0) == 25


def test_ma_errors():
    with pytest.raises(ValueError):
        moving_average(np.array([]), 500.0, 100.0)
    with pytest.raises(ValueError):
        moving_average(np.ones(5), 10.0, 10.0)


@given(st.integers(1, 10), st.integers(5, 40), st.integers(0, 2**31 - 1))
def test_ma_mass_conserved_on_periodic_extension(h, period, seed):
    w = 2 * h + 1
    x = np.random.default_rng(seed).normal(size=period)
    pad = -(-h // period)
    tiled = np.tile(x, 2 * pad + 1)
    mid = moving_average_w(tiled, w)[pad * period:(pad + 1) * period]
    assert abs(mid.mean() - x.mean()) < 1e-9


# ---- prominence ------------------------------------------------------------------

def brute_prominence(x, p):
    """Highest path-minimum toward strictly higher ground on each side; edge if none."""
    h = x[p]
    left = [min(x[q:p + 1]) for q in range(p) if x[q] > h]
    right = [min(x[p:q + 1]) for q in range(p + 1, len(x)) if x[q] > h]
    lb = max(left) if left else min(x[:p + 1])
    rb = max(right) if right else min(x[p:])
    return h - max(lb, rb)


def brute_peaks(x, thr):
    return [i for i in range(1, len(x) - 1)
            if x[i - 1] < x[i] > x[i + 1] and brute_prominence(x, i) >= thr]


def test_prominent_examples():
    assert prominent_peaks(np.arange(10.0), 0.1).tolist() == []
    assert prominent_peaks(np.array([0, 1, 0, 2, 0.0]), 0.5).tolist() == [1, 3]
    x = np.array([0, 1, 0.9, 1, 0.0])
    assert prominent_peaks(x, 0.5).tolist() == [1, 3]
    np.testing.assert_allclose(prominence(x, np.array([1, 3])), [brute_prominence(x, 1), brute_prominence(x, 3)])


def test_saddle_limits_lower_summit():
    x = np.array([0, 1, 0.9, 1.2, 0.0])
    np.testing.assert_allclose(prominence(x, np.array([1])), [0.1])
    assert prominent_peaks(x, 0.5).tolist() == [3]


@given(st.lists(st.integers(-5, 5), min_size=0, max_size=64), st.sampled_from([0.5, 1.0, 2.5]))
def test_prominent_matches_brute_force(vals, thr):
    x = np.array(vals, dtype=np.float64)
    assert prominent_peaks(x, thr).tolist() == brute_peaks(list(x), thr)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=64))
def test_prominence_matches_scipy(vals):
    x = np.array(vals)
    peaks = np.array([i for i in range(1, len(x) - 1) if x[i - 1] < x[i] > x[i + 1]], dtype=np.int64)
    if peaks.size:
        np.testing.assert_allclose(prominence(x, peaks), peak_prominences(x, peaks)[0], atol=1e-12)


# ---- Pan-Tompkins ------------------------------------------------------------------

def test_pt_nsr_hr60():
    seg, truth = synth_segment(SynthSpec(RhythmClass.NSR, 500.0, 10.0, 60.0, 0.0, True, 0.0, 1, 3))
    r = pan_tompkins(seg.data[0], 500.0)
    assert len(r) == 10
    assert np.max(np.abs(r - truth.r_peak_samples)) <= 12


def test_pt_flat_signal():
    assert pan_tompkins(np.zeros(5000), 500.0).size == 0


def test_pt_stach_hr120():
    seg, _ = synth_segment(SynthSpec(RhythmClass.STACH, 500.0, 10.0, 120.0, 0.02, True, 0.0, 1, 4))
    assert abs(len(pan_tompkins(seg.data[0], 500.0)) - 20) <= 1


def test_pt_too_short():
    with pytest.raises(ValueError):
        pan_tompkins(np.zeros(999), 500.0)


@pytest.mark.parametrize("fs", [100.0, 250.0, 500.0])
def test_pt_refractory_and_order(fs):
    rng = np.random.default_rng(int(fs))
    for cls in RhythmClass:
        seg, _ = synth_segment(random_spec(cls, rng, fs, 10.0, 2, 0.1))
        r = detect_rpeaks(seg.data, fs)
        assert np.all(np.diff(r) >= 0.2 * fs)
        assert r.size == 0 or (r[0] >= 0 and r[-1] < seg.n_samples)


# ---- beat spans --------------------------------------------------------------------

def test_beat_spans():
    assert beat_spans([100, 600, 1100]) == [BeatSpan(100, 600), BeatSpan(600, 1100)]
    assert beat_spans([5]) == []
    assert beat_spans([]) == []
