import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecgssl.data import (DataError, EcgRecord, Segment, import_csv, lead_mask, load_manifest, load_segments,
                         random_lead_mask, read_record, segment_record, write_dataset, zscore)


def _rec(n, fs=500.0, leads=1, rid="r0", seed=0):
    x = np.random.default_rng(seed).normal(size=(leads, n))
    return EcgRecord(rid, "p" + rid, fs, x, ("NSR",))


def _seg(data, rid="r", fs=500.0):
    return Segment(rid, "p", 0, fs, np.asarray(data, dtype=np.float64))


# ---- manifest ----------------------------------------------------------------

def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.tsv").write_text("")
    m = load_manifest(tmp_path)
    assert len(m) == 0


def test_manifest_preserves_order(tmp_path):
    recs = [_rec(100, rid=f"r{i}", seed=i) for i in (2, 0, 1)]
    write_dataset(tmp_path, recs, ["NSR"])
    m = load_manifest(tmp_path)
    assert [e.id for e in m.entries] == ["r2", "r0", "r1"]
    back = read_record(m, m.entries[0])
    np.testing.assert_array_equal(back.samples, recs[0].samples.astype(np.float32))


def test_manifest_duplicate_id_named(tmp_path):
    write_dataset(tmp_path, [_rec(10, rid="dup")])
    line = (tmp_path / "manifest.tsv").read_text()
    (tmp_path / "manifest.tsv").write_text(line + line)
    with pytest.raises(DataError, match="dup"):
        load_manifest(tmp_path)


def test_manifest_malformed_line_number(tmp_path):
    (tmp_path / "manifest.tsv").write_text("# comment\nonly\tthree\tfields\n")
    with pytest.raises(DataError, match="line 2"):
        load_manifest(tmp_path)


def test_manifest_missing(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope")


def test_manifest_missing_data_file(tmp_path):
    write_dataset(tmp_path, [_rec(10, rid="a")])
    (tmp_path / "records" / "a.f32").unlink()
    with pytest.raises(DataError, match="'a'"):
        load_manifest(tmp_path)


def test_manifest_unknown_label(tmp_path):
    write_dataset(tmp_path, [_rec(10, rid="a")], ["AFIB"])
    with pytest.raises(DataError, match="NSR"):
        load_manifest(tmp_path)


def test_import_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("I,II\n1,2\n3,4\n5,6\n")
    rec = import_csv(p, 250.0)
    assert rec.id == "x" and rec.fs_hz == 250.0
    np.testing.assert_array_equal(rec.samples, [[1, 3, 5], [2, 4, 6]])


# ---- segmentation --------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(5000, [0]), (4999, []), (12500, [0, 5000])])
def test_segment_counts(n, expected):
    segs = segment_record(_rec(n), 10.0)
    assert [s.start_sample for s in segs] == expected
    assert all(s.n_samples == 5000 for s in segs)


@given(st.integers(1, 3000), st.floats(0.5, 3.0))
def test_segments_partition_prefix(n, window):
    rec = _rec(n, fs=100.0, leads=2)
    segs = segment_record(rec, window)
    t = int(round(window * 100.0))
    k = n // t
    assert len(segs) == k
    if k:
        np.testing.assert_array_equal(np.concatenate([s.data for s in segs], axis=1), rec.samples[:, :k * t])


# ---- zscore ----------------------------------------------------------------------

def test_zscore_constant_lead():
    np.testing.assert_array_equal(zscore(_seg([[5, 5, 5, 5]])).data, [[0, 0, 0, 0]])


def test_zscore_two_points():
    np.testing.assert_allclose(zscore(_seg([[-1, 1]])).data, [[-1, 1]], atol=1e-7)


def test_zscore_near_identity_on_standardised():
    x = np.array([[-1.0, 1.0, -1.0, 1.0]])
    out = zscore(_seg(x)).data
    np.testing.assert_allclose(out, x / (1 + 1e-8), rtol=0, atol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_zscore_mean_zero_and_idempotent(vals):
    once = zscore(_seg([vals]))
    assert abs(once.data.mean()) < 1e-9
    twice = zscore(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


def test_zscore_rejects_nonfinite():
    with pytest.raises(DataError):
        zscore(_seg([[0.0, np.inf]]))


# ---- lead masking ----------------------------------------------------------------

def test_mask_p0_identity_and_p1_zero():
    s = _seg(np.random.default_rng(0).normal(size=(4, 50)))
    np.testing.assert_array_equal(random_lead_mask(s, 0.0, 1).data, s.data)
    np.testing.assert_array_equal(random_lead_mask(s, 1.0, 1).data, 0.0)


def test_mask_deterministic_and_survivors_untouched():
    s = _seg(np.random.default_rng(0).normal(size=(12, 50)))
    a = random_lead_mask(s, 0.5, 7)
    b = random_lead_mask(s, 0.5, 7)
    np.testing.assert_array_equal(a.data, b.data)
    kept = np.any(a.data != 0, axis=1)
    np.testing.assert_array_equal(a.data[kept], s.data[kept])
    assert a.data.shape == s.data.shape


def test_mask_fraction():
    draws = np.stack([lead_mask(1, 0.3, seed) for seed in range(10_000)])
    assert abs(draws.mean() - 0.3) <= 0.02


def test_mask_rejects_bad_probability():
    with pytest.raises(ValueError):
        lead_mask(3, 1.5, 0)


def test_load_segments_normalises(tmp_path):
    write_dataset(tmp_path, [_rec(2500, fs=100.0, leads=2)], ["NSR"])
    segs = load_segments(load_manifest(tmp_path), 10.0)
    assert len(segs) == 2
    np.testing.assert_allclose(segs[0].data.mean(axis=1), 0.0, atol=1e-9)
