"""Template-based synthetic ECG with exact R-peak ground truth.

Each beat is a sum of bumps centred on the R time: an optional Gaussian P wave,
a Mexican-hat QRS (positive R summit flanked by negative Q/S lobes) and a wide
Gaussian T wave. Bump "width" is the +-3 sigma span. RR intervals are gamma
distributed with the requested mean and coefficient of variation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .data import EcgRecord, Segment


class RhythmClass(str, Enum):
    NSR = "NSR"
    AFIB = "AFIB"
    STACH = "STACH"
    SBRAD = "SBRAD"


class SynthError(ValueError):
    pass


QRS_WIDTH_S = 0.080
QRS_AMP = 1.0
T_WIDTH_S = 0.160
T_AMP = 0.3
T_OFFSET_S = 0.300
P_WIDTH_S = 0.080
P_AMP = 0.15
P_OFFSET_S = -0.160
MIN_RR_S = 0.3
LEAD_GAINS = (1.0, 0.7, 0.5, 0.85, 1.2, 0.6, 0.9, 1.1, 0.75, 0.55, 0.95, 0.65)


@dataclass(frozen=True)
class SynthSpec:
    rhythm: RhythmClass = RhythmClass.NSR
    fs_hz: float = 500.0
    duration_s: float = 10.0
    hr_bpm: float = 75.0
    rr_cv: float = 0.02
    p_wave: bool = True
    noise_sd: float = 0.0
    n_leads: int = 1
    seed: int = 0

    def validate(self) -> None:
        r = RhythmClass(self.rhythm)
        if self.fs_hz <= 0 or self.duration_s <= 0 or self.hr_bpm <= 0:
            raise SynthError("fs_hz, duration_s and hr_bpm must be positive")
        if self.rr_cv < 0 or self.noise_sd < 0:
            raise SynthError("rr_cv and noise_sd must be non-negative")
        if self.n_leads < 1:
            raise SynthError("n_leads must be >= 1")
        if r is RhythmClass.STACH and not self.hr_bpm > 100:
            raise SynthError(f"STACH requires hr_bpm > 100, got {self.hr_bpm}")
        if r is RhythmClass.SBRAD and not self.hr_bpm < 60:
            raise SynthError(f"SBRAD requires hr_bpm < 60, got {self.hr_bpm}")
        if r is RhythmClass.NSR and not 60 <= self.hr_bpm <= 100:
            raise SynthError(f"NSR requires 60 <= hr_bpm <= 100, got {self.hr_bpm}")
        if r is RhythmClass.AFIB:
            if self.p_wave:
                raise SynthError("AFIB spec must have p_wave=False")
            if self.rr_cv < 0.15:
                raise SynthError(f"AFIB requires rr_cv >= 0.15, got {self.rr_cv}")


@dataclass(frozen=True)
class SynthTruth:
    r_peak_samples: np.ndarray
    rhythm: RhythmClass


def _gauss(t, sigma):
    return np.exp(-0.5 * (t / sigma) ** 2)


def beat_template(t: np.ndarray, p_wave: bool) -> np.ndarray:
    """Single beat evaluated at times ``t`` (seconds) relative to the R summit."""
    sq = QRS_WIDTH_S / 6.0
    u = t / sq
    wave = QRS_AMP * (1.0 - u * u) * np.exp(-0.5 * u * u)
    wave = wave + T_AMP * _gauss(t - T_OFFSET_S, T_WIDTH_S / 6.0)
    if p_wave:
        wave = wave + P_AMP * _gauss(t - P_OFFSET_S, P_WIDTH_S / 6.0)
    return wave


def draw_rr(rng: np.random.Generator, mean_s: float, cv: float, n: int) -> np.ndarray:
    if cv == 0:
        return np.full(n, mean_s)
    shape = 1.0 / (cv * cv)
    rr = rng.gamma(shape, mean_s / shape, size=n)
    return np.maximum(rr, MIN_RR_S)


def synth_segment(spec: SynthSpec, record_id: str = "synth", patient_id: str | None = None
                  ) -> tuple[Segment, SynthTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    fs = float(spec.fs_hz)
    n = int(round(spec.duration_s * fs))
    mean_rr = 60.0 / spec.hr_bpm

    # Two lead-in beats so the window opens mid-rhythm; beats start at integer samples.
    phase = rng.uniform(0.0, mean_rr)
    n_beats = int(np.ceil(spec.duration_s / MIN_RR_S)) + 4
    rr = draw_rr(rng, mean_rr, spec.rr_cv, n_beats)
    times = phase - rr[0] - rr[1] + np.concatenate([[0.0], np.cumsum(rr[:-1])])
    centers = np.round(times * fs).astype(np.int64)
    centers = centers[centers < n + int(fs)]

    t_axis = np.arange(n)
    span = int(np.ceil(0.6 * fs))
    wave = np.zeros(n)
    for c in centers:
        lo, hi = max(0, c - span), min(n, c + span + 1)
        if lo >= hi:
            continue
        wave[lo:hi] += beat_template((t_axis[lo:hi] - c) / fs, spec.p_wave)

    gains = np.array([LEAD_GAINS[i % len(LEAD_GAINS)] for i in range(spec.n_leads)])
    data = gains[:, None] * wave[None, :]
    if spec.noise_sd > 0:
        data = data + rng.normal(0.0, spec.noise_sd, size=data.shape)

    truth = centers[(centers >= 0) & (centers < n)]
    rhythm = RhythmClass(spec.rhythm)
    seg = Segment(record_id, patient_id or record_id, 0, fs, data, (rhythm.value,))
    return seg, SynthTruth(truth, rhythm)


def synth_batch(specs: Sequence[SynthSpec]) -> tuple[list[Segment], list[SynthTruth]]:
    segs, truths, errors = [], [], []
    for i, spec in enumerate(specs):
        try:
            seg, tr = synth_segment(spec, record_id=f"synth{i:05d}")
        except SynthError as exc:
            errors.append(f"spec {i}: {exc}")
            continue
        segs.append(seg)
        truths.append(tr)
    if errors:
        raise SynthError("; ".join(errors))
    return segs, truths


# Class-typical parameter ranges used when drawing random specs.
_HR_RANGE = {
    RhythmClass.NSR: (60.0, 100.0),
    RhythmClass.AFIB: (70.0, 130.0),
    RhythmClass.STACH: (105.0, 150.0),
    RhythmClass.SBRAD: (40.0, 58.0),
}
_CV_RANGE = {
    RhythmClass.NSR: (0.01, 0.04),
    RhythmClass.AFIB: (0.18, 0.30),
    RhythmClass.STACH: (0.01, 0.03),
    RhythmClass.SBRAD: (0.01, 0.04),
}


def random_spec(rhythm: RhythmClass | str, rng: np.random.Generator, fs_hz: float = 500.0,
                duration_s: float = 10.0, n_leads: int = 1,
                noise_sd: float | Sequence[float] = 0.05) -> SynthSpec:
    rhythm = RhythmClass(rhythm)
    hr = float(rng.uniform(*_HR_RANGE[rhythm]))
    cv = float(rng.uniform(*_CV_RANGE[rhythm]))
    if np.ndim(noise_sd):
        noise = float(noise_sd[int(rng.integers(len(noise_sd)))])
    else:
        noise = float(noise_sd)
    return SynthSpec(rhythm, fs_hz, duration_s, hr, cv, rhythm is not RhythmClass.AFIB, noise,
                     n_leads, int(rng.integers(2**31 - 1)))


def synth_records(classes: Sequence[str], per_class: int, seed: int, fs_hz: float = 500.0,
                  duration_s: float = 10.0, n_leads: int = 1,
                  noise_sd: float | Sequence[float] = 0.05, prefix: str = "") -> list[EcgRecord]:
    """Draw ``per_class`` records for every class, one patient per record."""
    rng = np.random.default_rng(seed)
    records = []
    for cls in classes:
        rhythm = RhythmClass(cls)
        for i in range(per_class):
            spec = random_spec(rhythm, rng, fs_hz, duration_s, n_leads, noise_sd)
            rid = f"{prefix}{rhythm.value}_{i:05d}"
            seg, _ = synth_segment(spec, rid, f"{prefix}pt_{rhythm.value}_{i:05d}")
            records.append(EcgRecord(rid, seg.patient_id, fs_hz, seg.data, seg.labels))
    return records
