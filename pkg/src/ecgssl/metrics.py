"""Evaluation metrics: AUROC (binary/macro), precision/recall/F1, the generalised
challenge score and the multilabel-to-binary AFib remap."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_REMAP = {
    "afib": ("AF", "AFib"),
    "normal": ("SR", "SA", "SB", "STach"),
}
SYNTH_REMAP = {
    "afib": ("AFIB",),
    "normal": ("NSR", "STACH", "SBRAD"),
}


class MetricError(ValueError):
    pass


def auroc_binary(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie) via average ranks (exact rational arithmetic)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # twice the 1-based average rank of every tie group is first + last
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size] - 1
    twice = np.empty(ss.size, dtype=np.int64)
    for a, b in zip(starts, ends):
        twice[a:b + 1] = (a + 1) + (b + 1)
    ranks2 = np.empty_like(twice)
    ranks2[order] = twice
    num = int(ranks2[y == 1].sum()) - n_pos * (n_pos + 1)
    return num / (2 * n_pos * n_neg)


@dataclass
class MacroAuroc:
    value: float
    per_class: list[float | None]
    skipped: list[int] = field(default_factory=list)


def auroc_macro(scores, labels) -> MacroAuroc:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise MetricError("scores and labels must both be N x K")
    per, skipped = [], []
    for k in range(s.shape[1]):
        col = y[:, k]
        if col.min() == col.max():
            per.append(None)
            skipped.append(k)
            continue
        per.append(auroc_binary(s[:, k], col))
    live = [v for v in per if v is not None]
    if not live:
        raise MetricError("every class is degenerate (single label value)")
    return MacroAuroc(float(np.mean(live)), per, skipped)


def prf1(pred, labels) -> tuple[float, float, float]:
    p = np.asarray(pred).astype(bool).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class ChallengeWeights:
    classes: list[str]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k = len(self.classes)
        if self.weights.shape != (k, k):
            raise MetricError(f"weight matrix must be {k} x {k}, got {self.weights.shape}")


def load_weights(path: str | Path) -> ChallengeWeights:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise MetricError(f"{path}: empty weights file")
    classes = [c.strip() for c in rows[0]]
    try:
        w = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise MetricError(f"{path}: {exc}") from None
    return ChallengeWeights(classes, w)


def save_weights(cw: ChallengeWeights, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cw.classes)
        for row in cw.weights:
            wr.writerow([repr(float(v)) for v in row])


def modified_confusion(labels, outputs) -> np.ndarray:
    """K x K matrix; each record spreads unit mass over (true, predicted) pairs,
    normalised by the size of the union of its true and predicted classes."""
    y = np.asarray(labels).astype(bool)
    o = np.asarray(outputs).astype(bool)
    norm = np.maximum((y | o).sum(axis=1), 1).astype(np.float64)
    return (y / norm[:, None]).T.astype(np.float64) @ o.astype(np.float64)


def challenge_metric(pred, labels, weights: ChallengeWeights, normal_class: str | None = None) -> float:
    """(observed - inactive) / (perfect - inactive) where the inactive baseline
    predicts only the normal class for every record."""
    y = np.asarray(labels).astype(bool)
    o = np.asarray(pred).astype(bool)
    k = len(weights.classes)
    if y.shape[1] != k or o.shape != y.shape:
        raise MetricError("prediction/label columns must match the weight classes")
    if normal_class is None:
        normal_class = next((c for c in ("NSR", "SR", "426783006") if c in weights.classes), weights.classes[0])
    if normal_class not in weights.classes:
        raise MetricError(f"normal class {normal_class!r} not in weight classes")
    inactive = np.zeros_like(y)
    inactive[:, weights.classes.index(normal_class)] = True
    w = weights.weights
    observed = float(np.sum(w * modified_confusion(y, o)))
    perfect = float(np.sum(w * modified_confusion(y, y)))
    base = float(np.sum(w * modified_confusion(y, inactive)))
    if perfect == base:
        raise MetricError("degenerate weights: perfect score equals inactive score")
    return (observed - base) / (perfect - base)


def _group_columns(vocab: Sequence[str], table: Mapping[str, Sequence[str]]):
    cols = {}
    for group in ("afib", "normal"):
        idx = []
        for code in table[group]:
            if code not in vocab:
                raise MetricError(f"label vocabulary lacks code {code!r}")
            idx.append(list(vocab).index(code))
        cols[group] = idx
    return cols["afib"], cols["normal"]


def remap_binary(scores, vocab: Sequence[str], table: Mapping[str, Sequence[str]] = DEFAULT_REMAP
                 ) -> tuple[np.ndarray, np.ndarray]:
    """AFib-vs-normal score afib / (afib + normal) from per-class sigmoid scores,
    where each group score is the max over its codes. Rows with both group
    maxima zero get 0.5 and are marked invalid."""
    s = np.asarray(scores, dtype=np.float64)
    a_idx, n_idx = _group_columns(vocab, table)
    a = s[:, a_idx].max(axis=1)
    n = s[:, n_idx].max(axis=1)
    tot = a + n
    valid = tot > 0
    out = np.where(valid, a / np.where(valid, tot, 1.0), 0.5)
    return out, valid


def remap_labels(labels, vocab: Sequence[str], table: Mapping[str, Sequence[str]] = DEFAULT_REMAP
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Binary AFib labels; valid where a record carries codes of exactly one group."""
    y = np.asarray(labels).astype(bool)
    a_idx, n_idx = _group_columns(vocab, table)
    a = y[:, a_idx].any(axis=1)
    n = y[:, n_idx].any(axis=1)
    return a.astype(np.int64), a ^ n


def parse_remap(text: str) -> dict[str, tuple[str, ...]]:
    """Parse ``afib=AF,AFib;normal=SR,SA`` into a remap table."""
    table = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, codes = part.partition("=")
        table[key.strip()] = tuple(c.strip() for c in codes.split(",") if c.strip())
    if set(table) != {"afib", "normal"}:
        raise MetricError("remap table needs exactly the groups 'afib' and 'normal'")
    return table
