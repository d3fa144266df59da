"""Convolution + transformer encoder, MLP decoder, linear head and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Segment

CHECKPOINT_MAGIC = b"ECGSSLCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_conv_blocks: int = 4
    conv_channels: int = 32
    conv_kernel: int = 2
    conv_stride: int = 2
    n_transformer_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    input_leads: int = 3
    input_samples: int = 500
    decoder_hidden: int = 64

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def frames(self, t: int) -> int:
        for _ in range(self.n_conv_blocks):
            t = -(-t // self.conv_stride)
        return t

    @classmethod
    def full_scale(cls, input_leads: int = 12, input_samples: int = 2500) -> "EncoderConfig":
        return cls(4, 256, 2, 2, 12, 768, 12, 3072, input_leads, input_samples, 256)


@dataclass
class Embedding:
    local: np.ndarray
    global_: np.ndarray


class ModelParams(dict):
    """Name -> Tensor mapping; names prefixed ``enc.``, ``dec.`` or ``head.``."""

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [self[k] for k in sorted(self) if k.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return int(sum(t.data.size for t in self.tensors(prefix)))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), True) for k, v in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.items()})

    def zero_grad(self):
        for t in self.values():
            t.grad = None


def _dense(rng, fan_in, fan_out, dtype):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype), True)


def _vec(n, value, dtype):
    return Tensor(np.full(n, value, dtype=dtype), True)


def init_params(cfg: EncoderConfig, seed: int, n_classes: int = 0, dtype=np.float32) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5EED]))
    p = ModelParams()
    cin = cfg.input_leads
    for i in range(cfg.n_conv_blocks):
        p[f"enc.conv{i}.w"] = _dense(rng, cfg.conv_kernel * cin, cfg.conv_channels, dtype)
        p[f"enc.conv{i}.b"] = _vec(cfg.conv_channels, 0.0, dtype)
        p[f"enc.conv{i}.ln_g"] = _vec(cfg.conv_channels, 1.0, dtype)
        p[f"enc.conv{i}.ln_b"] = _vec(cfg.conv_channels, 0.0, dtype)
        cin = cfg.conv_channels
    d = cfg.d_model
    p["enc.proj.w"] = _dense(rng, cin, d, dtype)
    p["enc.proj.b"] = _vec(d, 0.0, dtype)
    for i in range(cfg.n_transformer_layers):
        pre = f"enc.layer{i}."
        p[pre + "ln1_g"] = _vec(d, 1.0, dtype)
        p[pre + "ln1_b"] = _vec(d, 0.0, dtype)
        p[pre + "qkv.w"] = _dense(rng, d, 3 * d, dtype)
        p[pre + "qkv.b"] = _vec(3 * d, 0.0, dtype)
        p[pre + "out.w"] = _dense(rng, d, d, dtype)
        p[pre + "out.b"] = _vec(d, 0.0, dtype)
        p[pre + "ln2_g"] = _vec(d, 1.0, dtype)
        p[pre + "ln2_b"] = _vec(d, 0.0, dtype)
        p[pre + "ff1.w"] = _dense(rng, d, cfg.ffn_dim, dtype)
        p[pre + "ff1.b"] = _vec(cfg.ffn_dim, 0.0, dtype)
        p[pre + "ff2.w"] = _dense(rng, cfg.ffn_dim, d, dtype)
        p[pre + "ff2.b"] = _vec(d, 0.0, dtype)
    p["enc.final_ln_g"] = _vec(d, 1.0, dtype)
    p["enc.final_ln_b"] = _vec(d, 0.0, dtype)
    hid = cfg.decoder_hidden
    out = cfg.input_leads * cfg.input_samples
    p["dec.l1.w"] = _dense(rng, d, hid, dtype)
    p["dec.l1.b"] = _vec(hid, 0.0, dtype)
    p["dec.l2.w"] = _dense(rng, hid, hid, dtype)
    p["dec.l2.b"] = _vec(hid, 0.0, dtype)
    p["dec.l3.w"] = _dense(rng, hid, out, dtype)
    p["dec.l3.b"] = _vec(out, 0.0, dtype)
    if n_classes:
        add_head(p, cfg, n_classes, seed, dtype)
    return p


def add_head(p: ModelParams, cfg: EncoderConfig, n_classes: int, seed: int, dtype=np.float32) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x4EAD]))
    p["head.w"] = _dense(rng, cfg.d_model, n_classes, dtype)
    p["head.b"] = _vec(n_classes, 0.0, dtype)


_PE_CACHE: dict = {}


def positional_encoding(length: int, d: int, dtype) -> np.ndarray:
    key = (length, d, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]


def _attention(x: Tensor, p: ModelParams, pre: str, n_heads: int) -> Tensor:
    b, l, d = x.shape
    dh = d // n_heads
    qkv = ag.linear(x, p[pre + "qkv.w"], p[pre + "qkv.b"])
    qkv = ag.transpose(ag.reshape(qkv, (b, l, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = ag.softmax(scores, axis=-1)
    ctx = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (b, l, d))
    return ag.linear(ctx, p[pre + "out.w"], p[pre + "out.b"])


def encode_batch(p: ModelParams, cfg: EncoderConfig, x) -> tuple[Tensor, Tensor]:
    """Encode a (B, C, T) batch; returns local (B, frames, d) and global (B, d)."""
    x = ag.as_tensor(x, p["enc.proj.w"].dtype)
    if x.ndim != 3 or x.shape[1] != cfg.input_leads:
        raise ValueError(f"expected input of shape (B, {cfg.input_leads}, T), got {x.shape}")
    h = ag.transpose(x, (0, 2, 1))
    for i in range(cfg.n_conv_blocks):
        h = ag.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], cfg.conv_kernel, cfg.conv_stride)
        h = ag.gelu(ag.layer_norm(h, p[f"enc.conv{i}.ln_g"], p[f"enc.conv{i}.ln_b"]))
    h = ag.linear(h, p["enc.proj.w"], p["enc.proj.b"])
    h = h + positional_encoding(h.shape[1], cfg.d_model, h.dtype)
    for i in range(cfg.n_transformer_layers):
        pre = f"enc.layer{i}."
        h = h + _attention(ag.layer_norm(h, p[pre + "ln1_g"], p[pre + "ln1_b"]), p, pre, cfg.n_heads)
        f = ag.layer_norm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
        f = ag.linear(ag.gelu(ag.linear(f, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
        h = h + f
    local = ag.layer_norm(h, p["enc.final_ln_g"], p["enc.final_ln_b"])
    return local, ag.tmean(local, axis=1)


def encode(p: ModelParams, cfg: EncoderConfig, seg: Segment) -> Embedding:
    if seg.n_leads != cfg.input_leads:
        raise ValueError(f"segment has {seg.n_leads} leads, model expects {cfg.input_leads}")
    local, glob = encode_batch(p, cfg, seg.data[None])
    return Embedding(local.data[0], glob.data[0])


def decode(p: ModelParams, cfg: EncoderConfig, h) -> Tensor:
    """Map global embeddings (B, d) to reconstructions (B, C, T)."""
    h = ag.as_tensor(h, p["dec.l1.w"].dtype)
    z = ag.gelu(ag.linear(h, p["dec.l1.w"], p["dec.l1.b"]))
    z = ag.gelu(ag.linear(z, p["dec.l2.w"], p["dec.l2.b"]))
    z = ag.linear(z, p["dec.l3.w"], p["dec.l3.b"])
    return ag.reshape(z, (h.shape[0], cfg.input_leads, cfg.input_samples))


def classify(p: ModelParams, h) -> Tensor:
    h = ag.as_tensor(h, p["head.w"].dtype)
    return ag.linear(h, p["head.w"], p["head.b"])


# ---- checkpoint ---------------------------------------------------------

def _header(cfg: EncoderConfig, p: ModelParams, extra: dict | None) -> bytes:
    doc = {"config": asdict(cfg), "param_count": p.count(), "tensors": len(p)}
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(cfg: EncoderConfig, p: ModelParams, extra: dict | None = None) -> bytes:
    head = _header(cfg, p, extra)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    for name in sorted(p):
        arr = np.ascontiguousarray(p[name].data, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, cfg: EncoderConfig, p: ModelParams, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, p, extra))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[EncoderConfig, ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = EncoderConfig(**header["config"])
    p = ModelParams()
    for _ in range(header["tensors"]):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, "<f4", size, off).reshape(shape)
        off += 4 * size
        p[name] = Tensor(arr.astype(dtype), True)
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    if p.count() != header["param_count"]:
        raise CheckpointError(f"{path}: parameter count mismatch")
    return cfg, p, header.get("extra", {})
