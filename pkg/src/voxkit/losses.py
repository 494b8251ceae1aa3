"""Segmentation losses over (N, C, ...) logits and integer label maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, record_op
from .autodiff.ops import log_softmax_array, softmax_array


@dataclass
class LossConfig:
    kind: str = "ce"
    dice_smooth: float = 1e-5
    weight_floor: float = 1e-6
    dice_includes_background: bool = True

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be > 0")
        if not self.weight_floor > 0:
            raise ValueError("weight_floor must be > 0")

    def to_dict(self):
        return asdict(self)


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    C = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label values must lie in [0, {C})")
    return labels.astype(np.int64, copy=False)


def _one_hot(labels: np.ndarray, C: int, dtype) -> np.ndarray:
    oh = np.zeros((labels.shape[0], C) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(oh, labels[:, None], 1, axis=1)
    return oh


def _weighted_ce(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None, name: str) -> Tensor:
    z = logits.data
    logp = log_softmax_array(z)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    V = labels.size
    w = np.ones(labels.shape, dtype=z.dtype) if weights is None else weights.astype(z.dtype)
    loss = -(w.astype(np.float64) * picked).sum() / V
    out = np.asarray([loss], dtype=z.dtype)

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1, axis=1)
        grad *= (w / V)[:, None] * g[0]
        return (grad.astype(z.dtype, copy=False),)

    return record_op(name, (logits,), out, vjp)


def cross_entropy(logits: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    """Mean over voxels of -log softmax(logits)[label] (log-sum-exp form)."""
    labels = _check_labels(logits, labels)
    return _weighted_ce(logits, labels, None, "cross_entropy")


def class_weights(labels: np.ndarray, C: int, floor: float) -> np.ndarray:
    """w_c = 1 / (K * max(f_c, floor)) with K the number of classes present."""
    freq = np.bincount(labels.reshape(-1), minlength=C)[:C] / labels.size
    K = max(int((freq > 0).sum()), 1)
    return 1.0 / (K * np.maximum(freq, floor))


def class_balanced_cross_entropy(logits: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig(kind="balanced_ce")
    labels = _check_labels(logits, labels)
    w = class_weights(labels, logits.shape[1], cfg.weight_floor)
    return _weighted_ce(logits, labels, w[labels], "class_balanced_cross_entropy")


def soft_dice_loss(logits: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    """1 - mean over classes of (2 sum p g + s) / (sum p + sum g + s).

    Sums run over every voxel of the batch. Background (class 0) takes part
    unless ``cfg.dice_includes_background`` is False.
    """
    cfg = cfg or LossConfig(kind="dice")
    labels = _check_labels(logits, labels)
    z = logits.data
    C = z.shape[1]
    s = cfg.dice_smooth
    p = softmax_array(z)
    g = _one_hot(labels, C, z.dtype)
    axes = (0,) + tuple(range(2, z.ndim))
    inter = (p * g).sum(axis=axes, dtype=np.float64)
    denom = p.sum(axis=axes, dtype=np.float64) + g.sum(axis=axes, dtype=np.float64) + s
    ratio = (2 * inter + s) / denom
    cls = np.arange(C) if cfg.dice_includes_background else np.arange(1, C)
    loss = 1.0 - ratio[cls].mean()
    out = np.asarray([loss], dtype=z.dtype)

    def vjp(gout):
        coef = np.zeros(C)
        coef[cls] = -1.0 / len(cls)
        # d ratio_c / d p_c = (2 g_c denom_c - (2 I_c + s)) / denom_c^2
        a = (coef * 2 / denom).astype(z.dtype)
        b = (coef * (2 * inter + s) / denom ** 2).astype(z.dtype)
        shape = (1, C) + (1,) * (z.ndim - 2)
        gp = g * a.reshape(shape) - b.reshape(shape)
        gz = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        return (gz * gout[0],)

    return record_op("soft_dice_loss", (logits,), out, vjp)


LOSSES = {
    "ce": cross_entropy,
    "balanced_ce": class_balanced_cross_entropy,
    "dice": soft_dice_loss,
}


def compute_loss(logits: Tensor, labels, cfg: LossConfig) -> Tensor:
    return LOSSES[cfg.kind](logits, labels, cfg)
