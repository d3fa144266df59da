"""Dataset directory format, record loading, windowing, normalisation and lead masking.

A dataset is a directory holding

* ``manifest.tsv``: one record per line, tab separated
  ``id, patient_id, fs_hz, n_leads, n_samples, labels, path`` where labels are
  ``;``-separated codes (empty for unlabeled) and path is relative to the directory;
* ``labels.txt`` (optional): the ordered label vocabulary, one code per line;
* one float32 little-endian file per record, lead-major (C rows of N samples).
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_NAME = "manifest.tsv"
VOCAB_NAME = "labels.txt"
_FIELDS = ("id", "patient_id", "fs_hz", "n_leads", "n_samples", "labels", "path")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class EcgRecord:
    id: str
    patient_id: str
    fs_hz: float
    samples: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.samples.ndim != 2 or self.samples.shape[1] < 1:
            raise DataError(f"record {self.id}: samples must be C x N with N >= 1")
        if not self.fs_hz > 0:
            raise DataError(f"record {self.id}: fs_hz must be positive")

    @property
    def n_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class Segment:
    record_id: str
    patient_id: str
    start_sample: int
    fs_hz: float
    data: np.ndarray
    labels: tuple[str, ...] = ()

    @property
    def id(self) -> str:
        return f"{self.record_id}@{self.start_sample}"

    @property
    def n_leads(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class ManifestEntry:
    id: str
    patient_id: str
    fs_hz: float
    n_leads: int
    n_samples: int
    labels: tuple[str, ...]
    path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    label_vocabulary: list[str] = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.entries)


def _parse_line(line: str, lineno: int) -> ManifestEntry:
    parts = line.split("\t")
    if len(parts) != len(_FIELDS):
        raise DataError(f"manifest line {lineno}: expected {len(_FIELDS)} tab-separated fields, got {len(parts)}")
    rid, pid, fs, nl, ns, labels, path = parts
    try:
        fs_hz = float(fs)
        n_leads = int(nl)
        n_samples = int(ns)
    except ValueError as exc:
        raise DataError(f"manifest line {lineno}: {exc}") from None
    if not rid:
        raise DataError(f"manifest line {lineno}: empty id")
    if fs_hz <= 0 or n_leads < 1 or n_samples < 1:
        raise DataError(f"manifest line {lineno}: fs_hz, n_leads and n_samples must be positive")
    codes = tuple(c for c in labels.split(";") if c)
    return ManifestEntry(rid, pid, fs_hz, n_leads, n_samples, codes, path)


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    """Parse a manifest file (or a dataset directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            entry = _parse_line(line, lineno)
            if entry.id in seen:
                raise DataError(f"manifest line {lineno}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            if check_paths and not (root / entry.path).is_file():
                raise DataError(f"manifest line {lineno}: data file missing for {entry.id!r}: {entry.path}")
            entries.append(entry)

    vocab_file = root / VOCAB_NAME
    if vocab_file.is_file():
        vocab = [c.strip() for c in vocab_file.read_text(encoding="utf-8").splitlines() if c.strip()]
    else:
        vocab = sorted({c for e in entries for c in e.labels})
    known = set(vocab)
    for e in entries:
        unknown = [c for c in e.labels if c not in known]
        if unknown:
            raise DataError(f"record {e.id!r}: label {unknown[0]!r} not in vocabulary")
    return DatasetManifest(entries, vocab, root)


def read_record(manifest: DatasetManifest, entry: ManifestEntry) -> EcgRecord:
    raw = np.fromfile(manifest.root / entry.path, dtype="<f4")
    if raw.size != entry.n_leads * entry.n_samples:
        raise DataError(
            f"record {entry.id!r}: expected {entry.n_leads * entry.n_samples} samples, found {raw.size}"
        )
    samples = raw.reshape(entry.n_leads, entry.n_samples).astype(np.float64)
    return EcgRecord(entry.id, entry.patient_id, entry.fs_hz, samples, entry.labels)


def iter_records(manifest: DatasetManifest) -> Iterable[EcgRecord]:
    for entry in manifest.entries:
        yield read_record(manifest, entry)


def write_dataset(out_dir: str | Path, records: Sequence[EcgRecord], vocabulary: Sequence[str] = ()) -> Path:
    """Write records in the dataset directory format; returns the manifest path."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rel = f"records/{rec.id}.f32"
        rec.samples.astype("<f4").tofile(out / rel)
        lines.append(
            "\t".join(
                [rec.id, rec.patient_id, repr(float(rec.fs_hz)), str(rec.n_leads),
                 str(rec.n_samples), ";".join(rec.labels), rel]
            )
        )
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if vocabulary:
        (out / VOCAB_NAME).write_text("".join(c + "\n" for c in vocabulary), encoding="utf-8")
    return manifest_path


def import_csv(path: str | Path, fs_hz: float, record_id: str | None = None,
               patient_id: str | None = None, labels: Sequence[str] = ()) -> EcgRecord:
    """Read a CSV with a header row and one column per lead."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty CSV") from None
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise DataError(f"{path}: no samples")
    if any(len(r) != len(header) for r in rows):
        raise DataError(f"{path}: ragged rows")
    rid = record_id or path.stem
    return EcgRecord(rid, patient_id or rid, fs_hz, np.asarray(rows).T, tuple(labels))


def segment_record(rec: EcgRecord, window_s: float = 10.0) -> list[Segment]:
    """Non-overlapping, left-aligned windows; the trailing remainder is dropped."""
    if not window_s > 0:
        raise ValueError("window_s must be positive")
    t = int(round(window_s * rec.fs_hz))
    count = rec.n_samples // t
    return [
        Segment(rec.id, rec.patient_id, k * t, rec.fs_hz, rec.samples[:, k * t:(k + 1) * t].copy(), rec.labels)
        for k in range(count)
    ]


def zscore(seg: Segment, eps: float = 1e-8) -> Segment:
    """Per-lead standardisation with the population std and an eps guard."""
    x = np.asarray(seg.data, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"segment {seg.id}: non-finite values")
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    out = (x - mu) / (sd + eps)
    if not np.all(np.isfinite(out)):
        raise DataError(f"segment {seg.id}: non-finite values")
    return replace(seg, data=out)


def segment_seed(seg: Segment, rng_seed: int) -> np.random.SeedSequence:
    key = zlib.crc32(seg.id.encode("utf-8"))
    return np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFF, key])


def lead_mask(n_leads: int, p_mask: float, seed: np.random.SeedSequence | int) -> np.ndarray:
    """Boolean vector, True where a lead is zeroed."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return rng.random(n_leads) < p_mask


def random_lead_mask(seg: Segment, p_mask: float, rng_seed: int) -> Segment:
    """Zero each lead independently with probability ``p_mask``.

    Deterministic in (rng_seed, segment id); surviving leads are untouched.
    """
    mask = lead_mask(seg.n_leads, p_mask, segment_seed(seg, rng_seed))
    if not mask.any():
        return replace(seg, data=seg.data.copy())
    data = seg.data.copy()
    data[mask] = 0.0
    return replace(seg, data=data)


def load_segments(manifest: DatasetManifest, window_s: float = 10.0, normalize: bool = True) -> list[Segment]:
    segs = []
    for rec in iter_records(manifest):
        for s in segment_record(rec, window_s):
            segs.append(zscore(s) if normalize else s)
    return segs
