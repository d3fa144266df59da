"""Pretraining and finetuning loops, Adam, config layering and seeding."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .autograd import NumericError
from .data import DataError, Segment, lead_mask
from .features import FeaturePipeline, FeatureVector, extract_features
from .losses import LossConfig, batch_contrastive, bce_multilabel, recon_global, recon_peaks, total_loss
from .model import (EncoderConfig, ModelParams, add_head, checkpoint_bytes, classify, decode,
                    encode_batch, init_params)
from .pairing import PairingConfig, assemble_pairs, cmsc_split, pair_masks, shuffle_beats
from .peaks import detect_rpeaks

ENV_PREFIX = "ECGSSL_"
PRETRAIN_LOG_COLUMNS = ("epoch", "step", "loss_total", "loss_contrastive", "loss_global",
                        "loss_peaks", "skipped_anchors")
FINETUNE_LOG_COLUMNS = ("epoch", "step", "loss_bce")

# purpose tags mixed into the counter-based seeds
_TAG_ORDER, _TAG_MASK, _TAG_SHUFFLE, _TAG_HEAD = 0x0D, 0x3A, 0x5F, 0x7E
_EMBED_CHUNK = 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    p_lead_mask: float = 0.25
    window_s: float = 10.0
    half_s: float = 5.0
    pca_k: int = 50
    threads: int = 1
    freeze_encoder: bool = False
    pairing: PairingConfig = field(default_factory=PairingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @classmethod
    def for_finetune(cls, **kw) -> "TrainConfig":
        base = dict(epochs=64, lr=1e-6)
        base.update(kw)
        return cls(**base)

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.pairing.feat_enabled and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when feature pairing is enabled")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam constants out of range")
        if not 0.0 <= self.p_lead_mask <= 1.0:
            raise ConfigError("p_lead_mask must lie in [0, 1]")
        if not (self.window_s > 0 and self.half_s > 0 and 2 * self.half_s <= self.window_s):
            raise ConfigError("need 0 < 2 * half_s <= window_s")
        if self.pca_k < 1 or self.threads < 1:
            raise ConfigError("pca_k and threads must be >= 1")
        for sub in (self.pairing, self.loss, self.encoder):
            try:
                sub.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None


# ---- flat key/value layering ---------------------------------------------

_SECTIONS = {"pairing": PairingConfig, "loss": LossConfig, "encoder": EncoderConfig}
_ALIASES = {"lambda": "lam"}


def flat_fields() -> dict[str, tuple[str | None, type, object]]:
    """Flat key -> (section or None, type, default) for every TrainConfig leaf."""
    out: dict[str, tuple[str | None, type, object]] = {}
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.name in _SECTIONS:
            sub = getattr(defaults, f.name)
            for g in fields(_SECTIONS[f.name]):
                out[g.name] = (f.name, type(getattr(sub, g.name)), getattr(sub, g.name))
        else:
            out[f.name] = (None, type(getattr(defaults, f.name)), getattr(defaults, f.name))
    return out


def _coerce(key: str, kind: type, raw) -> object:
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def to_flat(cfg: TrainConfig) -> dict[str, object]:
    out = {}
    for key, (section, _, _) in flat_fields().items():
        out[key] = getattr(getattr(cfg, section), key) if section else getattr(cfg, key)
    return out


def from_flat(values: Mapping[str, object], base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    spec = flat_fields()
    top, subs = {}, {name: {} for name in _SECTIONS}
    for key, raw in values.items():
        key = _ALIASES.get(key, key)
        if key not in spec:
            raise ConfigError(f"unknown config key {key!r}")
        section, kind, _ = spec[key]
        val = _coerce(key, kind, raw)
        (subs[section] if section else top)[key] = val
    for name, upd in subs.items():
        if upd:
            top[name] = replace(getattr(cfg, name), **upd)
    out = replace(cfg, **top)
    out.validate()
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """Known TrainConfig keys from ``ECGSSL_<KEY>`` variables (case-insensitive key)."""
    environ = os.environ if environ is None else environ
    known = set(flat_fields()) | set(_ALIASES)
    out = {}
    for name, val in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in known:
                out[key] = val
    return out


def layered_config(base: TrainConfig, config_file: str | Path | None = None,
                   environ: Mapping[str, str] | None = None,
                   flags: Mapping[str, object] | None = None) -> TrainConfig:
    """Precedence: base < config file < environment < explicit flags."""
    merged: dict[str, object] = {}
    if config_file:
        merged.update(read_config_file(config_file))
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    return from_flat(merged, base)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


# ---- optimiser -----------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, state: OptimizerState, cfg: TrainConfig,
              names: Sequence[str] | None = None) -> None:
    """In-place bias-corrected Adam on ``names`` (default: every parameter with a grad)."""
    names = sorted(params) if names is None else list(names)
    for n in names:
        g = params[n].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {n} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in names:
        p = params[n]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {n} {p.data.shape}")
        dt = p.data.dtype
        m = state.m.setdefault(n, np.zeros_like(p.data))
        v = state.v.setdefault(n, np.zeros_like(p.data))
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        mhat = m / dt.type(c1)
        vhat = v / dt.type(c2)
        p.data -= dt.type(cfg.lr) * mhat / (np.sqrt(vhat) + dt.type(cfg.adam_eps))


# ---- corpus preparation --------------------------------------------------

def item_seed(seed: int, epoch: int, batch: int, item: int, tag: int) -> np.random.SeedSequence:
    """Counter-based seed; independent of execution order or thread count."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, epoch, batch, item, tag])


class FeatureCache:
    """R-peaks and raw feature vectors keyed by segment id."""

    def __init__(self):
        self._store: dict[str, tuple[np.ndarray, FeatureVector]] = {}

    def __len__(self):
        return len(self._store)

    def get(self, seg: Segment) -> tuple[np.ndarray, FeatureVector]:
        hit = self._store.get(seg.id)
        if hit is None:
            r = detect_rpeaks(seg.data, seg.fs_hz, 0)
            hit = (r, extract_features(seg, r))
            self._store[seg.id] = hit
        return hit

    def fill(self, segments: Sequence[Segment], threads: int = 1) -> list[tuple[np.ndarray, FeatureVector]]:
        if threads > 1:
            missing = [s for s in segments if s.id not in self._store]
            with ThreadPoolExecutor(threads) as pool:
                for s, res in zip(missing, pool.map(_peaks_and_features, missing)):
                    self._store[s.id] = res
        return [self.get(s) for s in segments]


def _peaks_and_features(seg: Segment):
    r = detect_rpeaks(seg.data, seg.fs_hz, 0)
    return r, extract_features(seg, r)


@dataclass
class Corpus:
    ids: list[str]
    anchors: np.ndarray     # (N, C, T_half)
    partners: np.ndarray    # (N, C, T_half)
    anchor_rpeaks: list[np.ndarray]
    labels: list[tuple[str, ...]]
    fs_hz: float
    reduced: np.ndarray | None = None
    pipeline: FeaturePipeline | None = None

    def __len__(self):
        return len(self.ids)


def build_corpus(segments: Sequence[Segment], cfg: TrainConfig, cache: FeatureCache | None = None,
                 pipeline: FeaturePipeline | None = None, with_features: bool = True) -> Corpus:
    """Split every 10-s segment into anchor/partner halves and, if requested,
    fit (or reuse) the feature pipeline and cache the reduced features."""
    if not segments:
        raise DataError("dataset contains no segments")
    fs = segments[0].fs_hz
    leads = segments[0].n_leads
    for s in segments:
        if s.fs_hz != fs or s.n_leads != leads:
            raise DataError(f"segment {s.id}: sampling rate or lead count differs from the rest")
    cache = cache if cache is not None else FeatureCache()
    prepped = cache.fill(segments, cfg.threads) if with_features else None
    anchors, partners, rpk = [], [], []
    for i, s in enumerate(segments):
        a, p = cmsc_split(s, cfg.half_s)
        anchors.append(a.data)
        partners.append(p.data)
        if prepped is not None:
            r = prepped[i][0]
        else:
            r = detect_rpeaks(s.data, fs, 0)
        rpk.append(r[r < a.n_samples])
    corpus = Corpus([s.id for s in segments], np.stack(anchors).astype(np.float32),
                    np.stack(partners).astype(np.float32), rpk, [s.labels for s in segments], fs)
    if with_features:
        vectors = [fv for _, fv in prepped]
        if pipeline is None:
            pipeline = FeaturePipeline.fit(vectors, cfg.pca_k)
        corpus.pipeline = pipeline
        corpus.reduced = pipeline.transform(vectors)
    return corpus


def _encoder_for(corpus: Corpus, cfg: TrainConfig) -> EncoderConfig:
    return replace(cfg.encoder, input_leads=corpus.anchors.shape[1], input_samples=corpus.anchors.shape[2])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(item_seed(seed, epoch, 0, 0, _TAG_ORDER)).permutation(n)


def batches(n: int, batch_size: int, seed: int, epoch: int, min_size: int = 1) -> list[np.ndarray]:
    order = epoch_order(n, seed, epoch)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < min_size:
        out.pop()
    return out


# ---- pretraining ---------------------------------------------------------

@dataclass
class PretrainResult:
    params: ModelParams
    encoder: EncoderConfig
    log: list[dict]
    pipeline: FeaturePipeline | None


def _augment(corpus: Corpus, idx: np.ndarray, cfg: TrainConfig, epoch: int, b: int):
    x = corpus.anchors[idx]
    masked = x.copy()
    shuffled = np.empty_like(x) if cfg.pairing.shuffle_enabled else None
    for item, j in enumerate(idx):
        if cfg.p_lead_mask > 0:
            m = lead_mask(x.shape[1], cfg.p_lead_mask, item_seed(cfg.seed, epoch, b, item, _TAG_MASK))
            masked[item, m] = 0.0
        if shuffled is not None:
            shuffled[item] = shuffle_beats(x[item], corpus.anchor_rpeaks[j],
                                           item_seed(cfg.seed, epoch, b, item, _TAG_SHUFFLE))
    return x, masked, shuffled


def pretrain_step(params: ModelParams, enc: EncoderConfig, corpus: Corpus, idx: np.ndarray,
                  cfg: TrainConfig, epoch: int, b: int):
    """Forward + backward for one batch; returns (total, contrastive, global, peaks, skipped)."""
    x, masked, shuffled = _augment(corpus, idx, cfg, epoch, b)
    bsz = len(idx)
    pairs = assemble_pairs(corpus.reduced[idx], cfg.pairing)
    pos, neg = pair_masks(pairs, bsz)
    groups = [masked]
    keep = [np.arange(bsz)]
    if cfg.pairing.cmsc_enabled:
        groups.append(corpus.partners[idx])
        keep.append(np.arange(bsz, 2 * bsz))
    if cfg.pairing.shuffle_enabled:
        groups.append(shuffled)
        keep.append(np.arange(2 * bsz, 3 * bsz))
    cols = np.concatenate(keep)
    _, glob = encode_batch(params, enc, np.concatenate(groups, axis=0))
    anchor_h = glob[0:bsz]
    lc, skipped = batch_contrastive(anchor_h, glob, pos[:, cols], neg[:, cols], cfg.loss.tau)
    xhat = decode(params, enc, anchor_h)
    lg = recon_global(x, xhat)
    lp = recon_peaks(x, xhat, cfg.loss, corpus.fs_hz)
    tot = total_loss(lc, lg, lp, cfg.loss)
    vals = tuple(float(t.data) for t in (tot, lc, lg, lp))
    if not all(np.isfinite(vals)):
        raise NumericError(f"non-finite loss at epoch {epoch} batch {b}: {vals}")
    params.zero_grad()
    tot.backward()
    return vals + (skipped,)


def pretrain(segments: Sequence[Segment], cfg: TrainConfig, cache: FeatureCache | None = None,
             pipeline: FeaturePipeline | None = None, init: ModelParams | None = None,
             progress: Callable[[dict], None] | None = None) -> PretrainResult:
    cfg.validate()
    if len(segments) < cfg.batch_size:
        raise DataError(f"dataset too small: {len(segments)} segments < batch_size {cfg.batch_size}")
    corpus = build_corpus(segments, cfg, cache, pipeline)
    enc = _encoder_for(corpus, cfg)
    params = init if init is not None else init_params(enc, cfg.seed)
    state = OptimizerState()
    log = []
    min_size = 2 if cfg.pairing.feat_enabled else 1
    with threadpool_limits(1):
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(4)
            skipped = 0
            blist = batches(len(corpus), cfg.batch_size, cfg.seed, epoch, min_size)
            for b, idx in enumerate(blist):
                *vals, sk = pretrain_step(params, enc, corpus, idx, cfg, epoch, b)
                adam_step(params, state, cfg)
                sums += vals
                skipped += sk
            mean = sums / max(len(blist), 1)
            row = dict(epoch=epoch, step=state.step, loss_total=mean[0], loss_contrastive=mean[1],
                       loss_global=mean[2], loss_peaks=mean[3], skipped_anchors=skipped)
            log.append(row)
            if progress:
                progress(row)
    params.zero_grad()
    return PretrainResult(params, enc, log, corpus.pipeline)


def log_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    return buf.getvalue()


def _stored_config(cfg: TrainConfig) -> dict[str, object]:
    # thread count only schedules work, so it stays out of the checkpoint bytes
    return {k: v for k, v in to_flat(cfg).items() if k != "threads"}


def pretrain_checkpoint(res: PretrainResult, cfg: TrainConfig) -> bytes:
    extra = {"stage": "pretrain", "train": _stored_config(cfg)}
    return checkpoint_bytes(res.encoder, res.params, extra)


# ---- finetuning / inference ------------------------------------------------

def label_matrix(labels: Sequence[Sequence[str]], ids: Sequence[str], vocab: Sequence[str]) -> np.ndarray:
    index = {c: k for k, c in enumerate(vocab)}
    y = np.zeros((len(labels), len(vocab)), dtype=np.float64)
    for i, (rid, labs) in enumerate(zip(ids, labels)):
        if not labs:
            raise DataError(f"record {rid} has no labels")
        for c in labs:
            if c not in index:
                raise DataError(f"record {rid}: label {c!r} not in vocabulary")
            y[i, index[c]] = 1.0
    return y


def _check_compatible(enc: EncoderConfig, corpus: Corpus) -> None:
    shape = corpus.anchors.shape[1:]
    if shape != (enc.input_leads, enc.input_samples):
        raise ConfigError(
            f"checkpoint expects {enc.input_leads} leads x {enc.input_samples} samples per half, "
            f"data gives {shape[0]} x {shape[1]}")


def _segment_embedding(params: ModelParams, enc: EncoderConfig, a, b):
    """Global embedding of a 10-s segment: mean of its two halves' embeddings."""
    n = a.shape[0]
    _, g = encode_batch(params, enc, np.concatenate([a, b], axis=0))
    return (g[0:n] + g[n:2 * n]) * 0.5


def embed_corpus(params: ModelParams, enc: EncoderConfig, corpus: Corpus, threads: int = 1) -> np.ndarray:
    """Frozen global embeddings, computed in fixed-size chunks (thread-count independent)."""
    starts = list(range(0, len(corpus), _EMBED_CHUNK))

    def run(s):
        sl = slice(s, s + _EMBED_CHUNK)
        return _segment_embedding(params, enc, corpus.anchors[sl], corpus.partners[sl]).data

    with threadpool_limits(1):
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


@dataclass
class FinetuneResult:
    params: ModelParams
    encoder: EncoderConfig
    vocabulary: list[str]
    log: list[dict]


def finetune(params: ModelParams, enc: EncoderConfig, segments: Sequence[Segment], vocabulary: Sequence[str],
             cfg: TrainConfig) -> FinetuneResult:
    """Attach a linear head to the global embedding and train it with multilabel BCE.

    With ``cfg.freeze_encoder`` only the head is updated (linear probe); the
    frozen embeddings are then computed once up front.
    """
    cfg = replace(cfg, pairing=replace(cfg.pairing, feat_enabled=False)) if cfg.batch_size < 2 else cfg
    cfg.validate()
    vocab = list(vocabulary)
    if not vocab:
        raise DataError("empty label vocabulary")
    corpus = build_corpus(segments, cfg, with_features=False)
    _check_compatible(enc, corpus)
    y = label_matrix(corpus.labels, corpus.ids, vocab)
    params = params.copy()
    for name in [k for k in params if k.startswith("head.")]:
        del params[name]
    add_head(params, enc, len(vocab), cfg.seed ^ _TAG_HEAD)
    trainable = sorted(k for k in params if k.startswith("head.") or
                       (not cfg.freeze_encoder and k.startswith("enc.")))
    frozen_h = embed_corpus(params, enc, corpus, cfg.threads) if cfg.freeze_encoder else None
    state = OptimizerState()
    log = []
    with threadpool_limits(1):
        for epoch in range(1, cfg.epochs + 1):
            total, blist = 0.0, batches(len(corpus), cfg.batch_size, cfg.seed, epoch)
            for idx in blist:
                if frozen_h is not None:
                    h = frozen_h[idx]
                else:
                    h = _segment_embedding(params, enc, corpus.anchors[idx], corpus.partners[idx])
                loss = bce_multilabel(classify(params, h), y[idx])
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NumericError(f"non-finite BCE at epoch {epoch}")
                params.zero_grad()
                loss.backward()
                adam_step(params, state, cfg, trainable)
                total += val
            log.append(dict(epoch=epoch, step=state.step, loss_bce=total / max(len(blist), 1)))
    params.zero_grad()
    return FinetuneResult(params, enc, vocab, log)


def finetune_checkpoint(res: FinetuneResult, cfg: TrainConfig) -> bytes:
    extra = {"stage": "finetune", "train": _stored_config(cfg), "vocabulary": res.vocabulary}
    return checkpoint_bytes(res.encoder, res.params, extra)


def predict_scores(params: ModelParams, enc: EncoderConfig, segments: Sequence[Segment],
                   cfg: TrainConfig | None = None) -> np.ndarray:
    """Per-class sigmoid scores, N x K."""
    cfg = cfg or TrainConfig()
    if "head.w" not in params:
        raise ConfigError("checkpoint has no classification head; run finetune first")
    corpus = build_corpus(segments, cfg, with_features=False)
    _check_compatible(enc, corpus)
    h = embed_corpus(params, enc, corpus, cfg.threads)
    z = h.astype(np.float64) @ params["head.w"].data.astype(np.float64) + params["head.b"].data
    return 1.0 / (1.0 + np.exp(-z))
