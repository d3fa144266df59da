import numpy as np
import pytest

from ecgssl.synth import (P_AMP, QRS_AMP, T_AMP, RhythmClass, SynthError, SynthSpec, random_spec, synth_batch,
                          synth_records, synth_segment)


def test_nsr_regular_beats():
    seg, truth = synth_segment(SynthSpec(RhythmClass.NSR, 500.0, 10.0, 60.0, 0.0, True, 0.0, 1, 1))
    assert len(truth.r_peak_samples) == 10
    assert np.all(np.diff(truth.r_peak_samples) == 500)
    assert seg.data.shape == (1, 5000)


def test_afib_with_p_wave_rejected():
    with pytest.raises(SynthError):
        synth_segment(SynthSpec(RhythmClass.AFIB, hr_bpm=90, rr_cv=0.2, p_wave=True))


@pytest.mark.parametrize("rhythm,hr", [("STACH", 90), ("SBRAD", 70), ("NSR", 120)])
def test_rate_mismatch_rejected(rhythm, hr):
    with pytest.raises(SynthError):
        synth_segment(SynthSpec(RhythmClass(rhythm), hr_bpm=hr))


def test_deterministic():
    spec = SynthSpec(noise_sd=0.1, seed=9, n_leads=3)
    a, ta = synth_segment(spec)
    b, tb = synth_segment(spec)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(ta.r_peak_samples, tb.r_peak_samples)


def test_batch_shapes():
    assert synth_batch([]) == ([], [])
    specs = [SynthSpec(hr_bpm=70, seed=1), SynthSpec(hr_bpm=80, seed=2)]
    segs, truths = synth_batch(specs)
    assert [s.record_id for s in segs] == ["synth00000", "synth00001"]
    rng = np.random.default_rng(0)
    mixed = [random_spec(c, rng) for c in ("NSR", "AFIB", "STACH", "SBRAD")]
    _, truths = synth_batch(mixed)
    assert [t.rhythm.value for t in truths] == ["NSR", "AFIB", "STACH", "SBRAD"]


def test_batch_errors_carry_indices():
    specs = [SynthSpec(), SynthSpec(hr_bpm=200), SynthSpec(RhythmClass.AFIB)]
    with pytest.raises(SynthError, match=r"spec 1:.*spec 2:"):
        synth_batch(specs)


def _cv(r):
    rr = np.diff(r)
    return rr.std() / rr.mean()


def test_rr_cv_matches_spec():
    _, truth = synth_segment(SynthSpec(hr_bpm=60, rr_cv=0.02, duration_s=1000.0, fs_hz=250.0, seed=4))
    assert len(truth.r_peak_samples) >= 990
    assert 0.01 <= _cv(truth.r_peak_samples) <= 0.03


def test_class_separability_premise():
    rng = np.random.default_rng(5)
    for _ in range(20):
        _, t_af = synth_segment(random_spec("AFIB", rng, 250.0, 60.0))
        _, t_n = synth_segment(random_spec("NSR", rng, 250.0, 60.0))
        assert _cv(t_af.r_peak_samples) >= 0.15
        assert _cv(t_n.r_peak_samples) <= 0.05


def test_template_amplitudes():
    assert QRS_AMP > T_AMP and QRS_AMP > P_AMP
    seg, truth = synth_segment(SynthSpec(hr_bpm=60, rr_cv=0.0, seed=2))
    x = seg.data[0]
    r = truth.r_peak_samples
    assert np.all(x[r] >= x.max() - 1e-12)


def test_truth_within_bounds_and_increasing():
    rng = np.random.default_rng(1)
    for cls in RhythmClass:
        seg, truth = synth_segment(random_spec(cls, rng, 200.0))
        r = truth.r_peak_samples
        assert np.all(np.diff(r) > 0) and r.min() >= 0 and r.max() < seg.n_samples


def test_synth_records_ids_and_labels():
    recs = synth_records(["NSR", "SBRAD"], 3, seed=0, fs_hz=100.0, n_leads=2, noise_sd=[0.0, 0.1])
    assert [r.id for r in recs] == ["NSR_00000", "NSR_00001", "NSR_00002",
                                    "SBRAD_00000", "SBRAD_00001", "SBRAD_00002"]
    assert recs[4].labels == ("SBRAD",) and recs[0].samples.shape == (2, 1000)
