"""Desk-scale pretrain + linear-probe experiment shared by the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from ecgssl.data import segment_record, zscore
from ecgssl.metrics import auroc_binary, remap_binary
from ecgssl.model import init_params
from ecgssl.pairing import PairingConfig
from ecgssl.synth import synth_records
from ecgssl.trainer import (FINETUNE_LOG_COLUMNS, PRETRAIN_LOG_COLUMNS, FeatureCache, TrainConfig, finetune,
                            finetune_checkpoint, log_csv, predict_scores, pretrain, pretrain_checkpoint)

PRETRAIN_CLASSES = ["NSR", "AFIB", "STACH", "SBRAD"]
NOISE = [0.02, 0.05, 0.1]
VOCAB = ["AFIB", "NSR"]
TABLE = {"afib": ("AFIB",), "normal": ("NSR",)}
FS = 100.0
LEADS = 3
PRETRAIN_EPOCHS = 20
PRETRAIN_LR = 1e-3


def _segments(classes, per_class, seed, prefix):
    recs = synth_records(classes, per_class, seed=seed, fs_hz=FS, n_leads=LEADS, noise_sd=NOISE, prefix=prefix)
    return [zscore(s) for r in recs for s in segment_record(r)]


@dataclass
class DeskData:
    pretrain: list
    probe: list
    test: list
    cache: FeatureCache


def desk_data(seed: int) -> DeskData:
    """2,000 pretraining segments plus disjoint 200-segment probe and test sets."""
    return DeskData(_segments(PRETRAIN_CLASSES, 500, 1000 + seed, "pre"),
                    _segments(VOCAB, 100, 2000 + seed, "probe"),
                    _segments(VOCAB, 100, 3000 + seed, "test"),
                    FeatureCache())


@dataclass
class ProbeResult:
    auroc: float
    final_bce: float
    checkpoint: bytes
    log: str


@dataclass
class RunResult:
    pretrain_checkpoint: bytes
    pretrain_log: str
    probe: ProbeResult
    seconds: float


def pretrain_config(seed: int, feat: bool = True, threads: int = 1) -> TrainConfig:
    return TrainConfig(epochs=PRETRAIN_EPOCHS, lr=PRETRAIN_LR, seed=seed, threads=threads,
                       pairing=PairingConfig(feat_enabled=feat))


def probe_config(seed: int, threads: int = 1) -> TrainConfig:
    return TrainConfig.for_finetune(epochs=300, lr=1e-2, batch_size=200, seed=seed, threads=threads,
                                    freeze_encoder=True)


def linear_probe(params, enc, data: DeskData, seed: int, threads: int = 1) -> ProbeResult:
    cfg = probe_config(seed, threads)
    res = finetune(params, enc, data.probe, VOCAB, cfg)
    scores = predict_scores(res.params, res.encoder, data.test, cfg)
    binary, valid = remap_binary(scores, VOCAB, TABLE)
    assert valid.all()
    y = np.array([1 if "AFIB" in s.labels else 0 for s in data.test])
    return ProbeResult(auroc_binary(binary, y), res.log[-1]["loss_bce"],
                       finetune_checkpoint(res, cfg), log_csv(res.log, FINETUNE_LOG_COLUMNS))


def run(data: DeskData, seed: int, feat: bool = True, threads: int = 1, fresh_cache: bool = False) -> RunResult:
    t0 = time.perf_counter()
    cfg = pretrain_config(seed, feat, threads)
    cache = FeatureCache() if fresh_cache else data.cache
    res = pretrain(data.pretrain, cfg, cache)
    probe = linear_probe(res.params, res.encoder, data, seed, threads)
    return RunResult(pretrain_checkpoint(res, cfg), log_csv(res.log, PRETRAIN_LOG_COLUMNS), probe, time.perf_counter() - t0)


def random_probe(data: DeskData, seed: int) -> ProbeResult:
    enc = replace(TrainConfig().encoder, input_leads=LEADS, input_samples=int(5 * FS))
    return linear_probe(init_params(enc, seed), enc, data, seed)
