"""Positive/negative set assembly: same-recording halves, feature similarity, beat shuffling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Segment
from .features import cosine_matrix, cosine_sim

# View kinds that can appear in a positive set.
ANCHOR = "anchor"
CMSC = "cmsc"
SHUFFLE = "shuffle"
_KIND_OFFSET = {ANCHOR: 0, CMSC: 1, SHUFFLE: 2}


@dataclass(frozen=True)
class PairingConfig:
    delta: float = 0.25
    shuffle_enabled: bool = True
    cmsc_enabled: bool = True
    feat_enabled: bool = True

    def validate(self) -> None:
        if not (self.shuffle_enabled or self.cmsc_enabled or self.feat_enabled):
            raise ValueError("at least one pairing mechanism must be enabled")


@dataclass
class PairSets:
    anchor_index: int
    positives: set[tuple[str, int]] = field(default_factory=set)
    negatives: set[int] = field(default_factory=set)

    def check(self) -> None:
        pos_anchors = {j for kind, j in self.positives if kind == ANCHOR}
        if self.anchor_index in pos_anchors or self.anchor_index in self.negatives:
            raise AssertionError(f"anchor {self.anchor_index} appears in its own pair sets")
        if pos_anchors & self.negatives:
            raise AssertionError(f"anchor {self.anchor_index}: positives and negatives overlap")


def cmsc_split(seg10: Segment, half_s: float = 5.0) -> tuple[Segment, Segment]:
    """First ``half_s`` seconds are the anchor, the next ``half_s`` the positive."""
    t = int(round(half_s * seg10.fs_hz))
    if seg10.n_samples < 2 * t:
        raise ValueError(
            f"segment {seg10.id} lasts {seg10.n_samples / seg10.fs_hz:.3f} s, need {2 * half_s} s")
    a = replace(seg10, data=seg10.data[:, :t].copy())
    p = replace(seg10, start_sample=seg10.start_sample + t, data=seg10.data[:, t:2 * t].copy())
    return a, p


def feature_pairs(anchor, batch: Sequence, delta: float,
                  anchor_index: int | None = None) -> tuple[set[int], set[int]]:
    """Split the batch (minus ``anchor_index``) by sim >= delta vs sim < delta."""
    pos, neg = set(), set()
    for j, z in enumerate(batch):
        if j == anchor_index:
            continue
        (pos if cosine_sim(anchor, z) >= delta else neg).add(j)
    return pos, neg


def feature_partition(z, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean B x B positive/negative masks over all anchor pairs (diagonal excluded)."""
    s = cosine_matrix(z)
    off = ~np.eye(s.shape[0], dtype=bool)
    return (s >= delta) & off, (s < delta) & off


def shuffle_permutation(n_beats: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_beats)
    if n_beats >= 2 and np.array_equal(perm, np.arange(n_beats)):
        perm = rng.permutation(n_beats)
    return perm


def shuffle_beats(data: np.ndarray, r, seed) -> np.ndarray:
    """Array-level core of :func:`heartbeat_shuffle`."""
    r = np.asarray(r, dtype=np.int64)
    if len(r) < 3:
        return data.copy()
    perm = shuffle_permutation(len(r) - 1, seed)
    beats = [data[:, r[j]:r[j + 1]] for j in range(len(r) - 1)]
    parts = [data[:, :r[0]]] + [beats[j] for j in perm] + [data[:, r[-1]:]]
    return np.concatenate(parts, axis=1)


def heartbeat_shuffle(seg: Segment, r, seed) -> Segment:
    """Permute the inter-R beats of all leads jointly; head and tail stay in place."""
    return replace(seg, data=shuffle_beats(seg.data, r, seed))


def assemble_pairs(reduced, cfg: PairingConfig) -> list[PairSets]:
    """Pair sets for a batch of B anchors whose reduced features are the rows of ``reduced``.

    Every anchor i has a same-recording partner ("cmsc", i) and a shuffled view
    ("shuffle", i); feature positives are ("anchor", j).
    """
    cfg.validate()
    z = np.asarray(reduced, dtype=np.float64)
    b = z.shape[0]
    if cfg.feat_enabled:
        pos_m, neg_m = feature_partition(z, cfg.delta)
    out = []
    for i in range(b):
        ps = PairSets(i)
        if cfg.cmsc_enabled:
            ps.positives.add((CMSC, i))
        if cfg.shuffle_enabled:
            ps.positives.add((SHUFFLE, i))
        if cfg.feat_enabled:
            ps.positives.update((ANCHOR, int(j)) for j in np.flatnonzero(pos_m[i]))
            ps.negatives.update(int(j) for j in np.flatnonzero(neg_m[i]))
        out.append(ps)
    return out


def pair_masks(pairs: Sequence[PairSets], batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative masks of shape B x 3B over the stacked views
    [anchors | cmsc partners | shuffled anchors]."""
    pos = np.zeros((len(pairs), 3 * batch_size), dtype=bool)
    neg = np.zeros_like(pos)
    for row, ps in enumerate(pairs):
        for kind, j in ps.positives:
            pos[row, _KIND_OFFSET[kind] * batch_size + j] = True
        for j in ps.negatives:
            neg[row, j] = True
    return pos, neg
