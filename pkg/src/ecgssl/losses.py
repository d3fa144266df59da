"""Contrastive, reconstruction and classification losses plus a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor
from .peaks import prominent_peaks, window_length


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lam: float = 1.0
    alpha: float = 0.2
    beta: float = 0.1
    peak_prominence: float = 0.1
    peak_window_ms: float = 100.0

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lam < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("lam, alpha and beta must be non-negative")
        if not self.peak_prominence > 0 or not self.peak_window_ms > 0:
            raise ValueError("peak_prominence and peak_window_ms must be positive")


def contrastive_scores(anchors: Tensor, views: Tensor, tau: float) -> Tensor:
    """Cosine similarities anchors x views, divided by tau."""
    a = ag.l2_normalize(anchors)
    v = ag.l2_normalize(views)
    return ag.matmul(a, ag.transpose(v, (1, 0))) * (1.0 / tau)


def batch_contrastive(anchors: Tensor, views: Tensor, pos: np.ndarray, neg: np.ndarray,
                      tau: float) -> tuple[Tensor, int]:
    """Loss averaged over anchors with at least one positive, plus the skip count.

    ``pos``/``neg`` are boolean (n_anchors, n_views) masks.
    """
    return ag.multi_positive_nce(contrastive_scores(anchors, views, tau), pos, neg)


def contrastive_loss(anchor_h, positives: Sequence, negatives: Sequence, tau: float) -> Tensor:
    """Single-anchor loss with the given positive and negative embeddings."""
    if len(positives) == 0:
        raise ValueError("contrastive_loss needs at least one positive")
    anchor = ag.as_tensor(anchor_h)
    items = [ag.reshape(ag.as_tensor(v, anchor.dtype), (1, -1)) for v in list(positives) + list(negatives)]
    views = ag.concat(items, axis=0)
    n_pos = len(positives)
    pos = np.zeros((1, len(items)), dtype=bool)
    pos[0, :n_pos] = True
    neg = ~pos
    loss, _ = batch_contrastive(ag.reshape(anchor, (1, -1)), views, pos, neg, tau)
    return loss


def recon_global(x, xhat) -> Tensor:
    """Element-mean squared error."""
    xhat = ag.as_tensor(xhat)
    x = np.asarray(x, dtype=xhat.dtype)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    return ag.tmean(ag.square(xhat - x))


def recon_peaks(x, xhat, cfg: LossConfig, fs_hz: float) -> Tensor:
    """Peak-value reconstruction loss.

    Both signals are smoothed, prominent peaks are picked independently on each,
    the peak values (in time order) are zero-padded to a common length and
    compared with an element-mean squared error per lead; leads then records
    are averaged. Peak positions are constants for differentiation.
    """
    xhat = ag.as_tensor(xhat)
    x = np.asarray(x, dtype=xhat.dtype)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    if xhat.ndim == 2:
        x = x[None]
        xhat = ag.reshape(xhat, (1,) + xhat.shape)
    b, c, t = x.shape
    w = min(window_length(fs_hz, cfg.peak_window_ms), 2 * t - 1)
    xs = ag.moving_average(ag.Tensor(x), w).data
    hs = ag.moving_average(xhat, w)
    hs_flat = ag.reshape(hs, (b * c * t,))
    hs_val = hs.data.reshape(b * c, t)
    xs_val = xs.reshape(b * c, t)

    gather_idx, targets, weights = [], [], []
    const = 0.0
    for row in range(b * c):
        px = prominent_peaks(xs_val[row], cfg.peak_prominence)
        ph = prominent_peaks(hs_val[row], cfg.peak_prominence)
        n = max(len(px), len(ph))
        if n == 0:
            continue
        tx = np.zeros(n)
        tx[:len(px)] = xs_val[row, px]
        gather_idx.append(row * t + ph)
        targets.append(tx[:len(ph)])
        weights.append(np.full(len(ph), 1.0 / n))
        const += float(np.sum(tx[len(ph):] ** 2)) / n
    scale = 1.0 / (b * c)
    if not gather_idx:
        return ag.tsum(hs_flat[0:0]) + const * scale
    idx = np.concatenate(gather_idx)
    tgt = np.concatenate(targets).astype(xhat.dtype)
    wts = np.concatenate(weights).astype(xhat.dtype)
    diff = hs_flat[idx] - tgt
    return ag.tsum(ag.square(diff) * wts) * scale + const * scale


def total_loss(contrastive, recon_g, recon_p, cfg: LossConfig):
    """contrastive + lam * (alpha * global + beta * peaks); works on floats or Tensors."""
    return contrastive + (recon_g * cfg.alpha + recon_p * cfg.beta) * cfg.lam


def bce_multilabel(logits, targets) -> Tensor:
    """Mean binary cross-entropy with logits, in the softplus form."""
    z = ag.as_tensor(logits)
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be 0 or 1")
    return ag.tmean(ag.softplus(z) - z * y)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol_rel: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol_rel


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor] | dict, tol_rel: float = 1e-4,
               step: float = 1e-4, max_params: int = 10_000, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, floor),
    so entries whose true gradient is ~0 are judged on an absolute scale.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    total = sum(p.data.size for p in plist)
    if total > max_params:
        raise ValueError(f"{total} parameters exceed the grad-check budget of {max_params}")
    for p in plist:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
        p.requires_grad = True
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss in grad_check")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]
    worst_rel = worst_abs = 0.0
    for p, g in zip(plist, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite loss during finite differences")
            num = (fp - fm) / (2 * step)
            err = abs(gflat[i] - num)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(gflat[i]), abs(num), floor))
    for p in plist:
        p.grad = None
    return GradCheckReport(worst_rel, worst_abs, total, tol_rel)
