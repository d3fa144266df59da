"""Physiological descriptors, their normalisation, PCA reduction and cosine similarity.

Feature catalog (version ``FEATURE_VERSION``), in this order:

global, from the reference-lead R-peaks
    r_count, rr_mean_ms, rr_std_ms, rr_min_ms, rr_max_ms, rr_cv,
    hrv_mean_rr_ms, hrv_sdnn_ms, hrv_rmssd_ms, hrv_pnn50, hrv_mean_hr_bpm,
    beat_dur_mean_ms, beat_dur_std_ms, qrs_width_mean_ms, qrs_width_std_ms
per lead ``L<c>_`` (first ``MAX_LEADS`` leads)
    r_amp_mean, r_amp_std, t_peak_count, t_peak_amp, p_peak_count, p_peak_amp,
    slope_mean, slope_max, energy

Secondary peaks are prominence-detected maxima of the lightly smoothed lead
inside each R-R interval, away from both QRS complexes; those in the first 60 %
of the interval stand in for T waves, the rest for P waves.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Segment
from .peaks import beat_spans, moving_average, prominent_peaks

FEATURE_VERSION = 1
PAD_LENGTH = 150
MAX_LEADS = 12
SECONDARY_PROMINENCE = 0.1
SECONDARY_SMOOTH_MS = 40.0
QRS_GUARD_MS = 60.0

GLOBAL_FEATURES = (
    "r_count", "rr_mean_ms", "rr_std_ms", "rr_min_ms", "rr_max_ms", "rr_cv",
    "hrv_mean_rr_ms", "hrv_sdnn_ms", "hrv_rmssd_ms", "hrv_pnn50", "hrv_mean_hr_bpm",
    "beat_dur_mean_ms", "beat_dur_std_ms", "qrs_width_mean_ms", "qrs_width_std_ms",
)
LEAD_FEATURES = (
    "r_amp_mean", "r_amp_std", "t_peak_count", "t_peak_amp", "p_peak_count", "p_peak_amp",
    "slope_mean", "slope_max", "energy",
)


def feature_ids(n_leads: int) -> list[str]:
    ids = list(GLOBAL_FEATURES)
    for c in range(min(n_leads, MAX_LEADS)):
        ids.extend(f"L{c}_{name}" for name in LEAD_FEATURES)
    return ids


@dataclass
class HrvMetrics:
    mean_rr_ms: float
    sdnn_ms: float
    rmssd_ms: float
    pnn50_fraction: float
    mean_hr_bpm: float
    valid: dict[str, bool] = field(default_factory=dict)


def hrv_metrics(rr_ms) -> HrvMetrics:
    """Time-domain HRV. sdnn/rmssd/pnn50 need at least two intervals."""
    rr = np.asarray(rr_ms, dtype=np.float64)
    if rr.size == 0:
        raise ValueError("hrv_metrics needs at least one RR interval")
    mean = float(rr.mean())
    hr = 60000.0 / mean
    if rr.size < 2:
        return HrvMetrics(mean, 0.0, 0.0, 0.0, hr,
                          {"mean_rr_ms": True, "sdnn_ms": False, "rmssd_ms": False,
                           "pnn50_fraction": False, "mean_hr_bpm": True})
    diff = np.diff(rr)
    return HrvMetrics(mean, float(rr.std()), float(np.sqrt(np.mean(diff ** 2))),
                      float(np.mean(np.abs(diff) > 50.0)), hr,
                      dict.fromkeys(("mean_rr_ms", "sdnn_ms", "rmssd_ms", "pnn50_fraction", "mean_hr_bpm"), True))


@dataclass
class FeatureVector:
    values: np.ndarray
    valid: np.ndarray
    feature_ids: list[str]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


class _Filler:
    def __init__(self, ids):
        self.index = {k: i for i, k in enumerate(ids)}
        self.values = np.zeros(len(ids))
        self.valid = np.zeros(len(ids), dtype=bool)

    def set(self, name, value):
        self.values[self.index[name]] = float(value)
        self.valid[self.index[name]] = True


def _qrs_widths(x, r, fs):
    limit = int(round(0.1 * fs))
    widths = []
    for p in r:
        half = 0.5 * abs(x[p])
        if half == 0:
            continue
        lo = p
        while lo > max(0, p - limit) and abs(x[lo - 1]) >= half:
            lo -= 1
        hi = p
        while hi < min(len(x) - 1, p + limit) and abs(x[hi + 1]) >= half:
            hi += 1
        widths.append((hi - lo + 1) * 1000.0 / fs)
    return np.asarray(widths)


def _secondary_peaks(x, r, fs):
    """Per-beat (count, tallest amplitude) for the T-like and P-like regions."""
    smooth = moving_average(x, fs, SECONDARY_SMOOTH_MS)
    guard = int(round(QRS_GUARD_MS * fs / 1000.0))
    t_counts, t_amps, p_counts, p_amps = [], [], [], []
    for span in beat_spans(r):
        lo, hi = span.start + guard, span.end_exclusive - guard
        if hi - lo < 3:
            continue
        seg = smooth[lo:hi]
        pk = prominent_peaks(seg, SECONDARY_PROMINENCE)
        split = int(0.6 * (span.end_exclusive - span.start)) - guard
        t_pk = pk[pk < split]
        p_pk = pk[pk >= split]
        t_counts.append(len(t_pk))
        p_counts.append(len(p_pk))
        if len(t_pk):
            t_amps.append(seg[t_pk].max())
        if len(p_pk):
            p_amps.append(seg[p_pk].max())
    return t_counts, t_amps, p_counts, p_amps


def extract_features(seg: Segment, r) -> FeatureVector:
    """Fill the catalog for one (normalised) segment given reference-lead R-peaks."""
    x = np.asarray(seg.data, dtype=np.float64)
    fs = float(seg.fs_hz)
    r = np.asarray(r, dtype=np.int64)
    ids = feature_ids(x.shape[0])
    f = _Filler(ids)

    f.set("r_count", len(r))
    if len(r) >= 2:
        rr = np.diff(r) * 1000.0 / fs
        f.set("rr_mean_ms", rr.mean())
        f.set("rr_std_ms", rr.std())
        f.set("rr_min_ms", rr.min())
        f.set("rr_max_ms", rr.max())
        f.set("rr_cv", rr.std() / rr.mean())
        hrv = hrv_metrics(rr)
        for key, name in (("mean_rr_ms", "hrv_mean_rr_ms"), ("sdnn_ms", "hrv_sdnn_ms"),
                          ("rmssd_ms", "hrv_rmssd_ms"), ("pnn50_fraction", "hrv_pnn50"),
                          ("mean_hr_bpm", "hrv_mean_hr_bpm")):
            if hrv.valid[key]:
                f.set(name, getattr(hrv, key))
        spans = beat_spans(r)
        dur = np.array([(s.end_exclusive - s.start) * 1000.0 / fs for s in spans])
        f.set("beat_dur_mean_ms", dur.mean())
        f.set("beat_dur_std_ms", dur.std())
    if len(r):
        widths = _qrs_widths(x[0], r, fs)
        if widths.size:
            f.set("qrs_width_mean_ms", widths.mean())
            f.set("qrs_width_std_ms", widths.std())

    for c in range(min(x.shape[0], MAX_LEADS)):
        lead = x[c]
        pre = f"L{c}_"
        if len(r):
            amps = lead[r]
            f.set(pre + "r_amp_mean", amps.mean())
            f.set(pre + "r_amp_std", amps.std())
        if len(r) >= 2:
            t_counts, t_amps, p_counts, p_amps = _secondary_peaks(lead, r, fs)
            if t_counts:
                f.set(pre + "t_peak_count", np.mean(t_counts))
                f.set(pre + "p_peak_count", np.mean(p_counts))
            if t_amps:
                f.set(pre + "t_peak_amp", np.mean(t_amps))
            if p_amps:
                f.set(pre + "p_peak_amp", np.mean(p_amps))
        slope = np.abs(np.diff(lead)) * fs if lead.size > 1 else np.zeros(1)
        f.set(pre + "slope_mean", slope.mean())
        f.set(pre + "slope_max", slope.max())
        f.set(pre + "energy", np.sum(lead * lead) / lead.size)
    return FeatureVector(f.values, f.valid, ids)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def fit_feature_stats(vectors: Sequence[FeatureVector], length: int = PAD_LENGTH) -> FeatureStats:
    """Per-position mean and population std over valid entries only."""
    vals = np.zeros((len(vectors), length))
    mask = np.zeros((len(vectors), length), dtype=bool)
    for i, fv in enumerate(vectors):
        n = min(len(fv.values), length)
        vals[i, :n] = fv.values[:n]
        mask[i, :n] = fv.valid[:n]
    cnt = mask.sum(axis=0)
    safe = np.maximum(cnt, 1)
    mean = np.where(mask, vals, 0.0).sum(axis=0) / safe
    var = np.where(mask, (vals - mean) ** 2, 0.0).sum(axis=0) / safe
    return FeatureStats(mean, np.sqrt(var))


def pad_and_scale(fv: FeatureVector, stats: FeatureStats, length: int = PAD_LENGTH) -> np.ndarray:
    if len(stats.mean) != length or len(stats.std) != length:
        raise ValueError(f"feature stats have length {len(stats.mean)}, expected {length}")
    if len(fv.values) > length:
        raise ValueError(f"feature vector longer than {length}")
    out = np.zeros(length)
    n = len(fv.values)
    z = (fv.values - stats.mean[:n]) / (stats.std[:n] + 1e-8)
    out[:n] = np.where(fv.valid, z, 0.0)
    return out


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    feature_ids: list[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def degenerate(self) -> int:
        """Number of kept components with (numerically) zero variance."""
        tol = 1e-10 * max(float(self.explained_variance[0]) if self.k else 0.0, 1e-300)
        return int(np.sum(self.explained_variance <= tol))


def pca_fit(matrix, k: int = 50, feature_ids: Sequence[str] = ()) -> PcaModel:
    """Principal axes by eigendecomposition of the sample covariance.

    Sign convention: the largest-magnitude entry of every component is positive.
    """
    x = np.asarray(matrix, dtype=np.float64)
    n, f = x.shape
    if k < 1 or k > f:
        raise ValueError(f"k must be in [1, {f}], got {k}")
    if n < k:
        raise ValueError(f"pca_fit needs at least k={k} rows, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:k]
    comps = v[:, order].T.copy()
    var = np.maximum(w[order], 0.0)
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), idx])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PcaModel(mean, comps, var, list(feature_ids))


def pca_apply(model: PcaModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.mean.shape[0]:
        raise ValueError(f"expected vectors of length {model.mean.shape[0]}, got {v.shape[-1]}")
    return (v - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, reduced) -> np.ndarray:
    return np.asarray(reduced) @ model.components + model.mean


_PCA_MAGIC = b"ECGPCA01"


def save_pca(model: PcaModel, path: str | Path) -> None:
    path = Path(path)
    f = model.mean.shape[0]
    with open(path, "wb") as fh:
        fh.write(_PCA_MAGIC)
        fh.write(struct.pack("<II", model.k, f))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.components.astype("<f8").tobytes())
        fh.write(model.explained_variance.astype("<f8").tobytes())
    path.with_suffix(path.suffix + ".features.txt").write_text(
        "".join(i + "\n" for i in model.feature_ids), encoding="utf-8")


def load_pca(path: str | Path) -> PcaModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _PCA_MAGIC:
        raise ValueError(f"{path}: not a PCA model file")
    k, f = struct.unpack_from("<II", raw, 8)
    off = 16
    expect = off + 8 * (f + k * f + k)
    if len(raw) != expect:
        raise ValueError(f"{path}: truncated PCA model ({len(raw)} bytes, expected {expect})")
    mean = np.frombuffer(raw, "<f8", f, off).astype(np.float64)
    off += 8 * f
    comps = np.frombuffer(raw, "<f8", k * f, off).reshape(k, f).astype(np.float64)
    off += 8 * k * f
    var = np.frombuffer(raw, "<f8", k, off).astype(np.float64)
    side = path.with_suffix(path.suffix + ".features.txt")
    ids = side.read_text(encoding="utf-8").split() if side.is_file() else []
    return PcaModel(mean, comps, var, ids)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb + 1e-12))


def cosine_matrix(z) -> np.ndarray:
    """Pairwise cosine similarities of the rows of ``z`` (zero rows give 0)."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    denom = np.outer(norms, norms) + 1e-12
    s = (z @ z.T) / denom
    zero = norms == 0
    s[zero, :] = 0.0
    s[:, zero] = 0.0
    return s


@dataclass
class FeaturePipeline:
    """Fitted Norm -> PCA transform applied to raw feature vectors."""

    stats: FeatureStats
    pca: PcaModel

    @classmethod
    def fit(cls, vectors: Sequence[FeatureVector], k: int = 50) -> "FeaturePipeline":
        stats = fit_feature_stats(vectors)
        padded = np.stack([pad_and_scale(v, stats) for v in vectors])
        k = min(k, padded.shape[0])
        ids = vectors[0].feature_ids if vectors else []
        return cls(stats, pca_fit(padded, k, ids))

    def transform(self, vectors: Sequence[FeatureVector]) -> np.ndarray:
        padded = np.stack([pad_and_scale(v, self.stats) for v in vectors])
        return pca_apply(self.pca, padded)

    def save(self, path: str | Path) -> None:
        """PCA model at ``path`` plus a ``.stats.csv`` sidecar with the scaling."""
        path = Path(path)
        save_pca(self.pca, path)
        rows = "".join(f"{m!r},{s!r}\n" for m, s in zip(self.stats.mean.tolist(), self.stats.std.tolist()))
        path.with_suffix(path.suffix + ".stats.csv").write_text("mean,std\n" + rows, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeaturePipeline":
        path = Path(path)
        side = path.with_suffix(path.suffix + ".stats.csv")
        if not side.is_file():
            raise ValueError(f"{path}: missing scaling sidecar {side.name}")
        lines = side.read_text(encoding="utf-8").splitlines()[1:]
        vals = np.array([[float(v) for v in ln.split(",")] for ln in lines if ln.strip()])
        if vals.shape != (PAD_LENGTH, 2):
            raise ValueError(f"{side}: expected {PAD_LENGTH} rows of mean,std")
        return cls(FeatureStats(vals[:, 0].copy(), vals[:, 1].copy()), load_pca(path))
