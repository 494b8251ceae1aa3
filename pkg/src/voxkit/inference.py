"""Sliding-window prediction over volumes of any shape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff.ops import softmax_array
from .models import ModelConfig, forward
from .volume_io import Volume


@dataclass
class TilePlan:
    patch_size: int
    stride: int
    starts: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    pads: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]

    def tiles(self):
        for z in self.starts[0]:
            for y in self.starts[1]:
                for x in self.starts[2]:
                    yield z, y, x

    def __len__(self):
        return len(self.starts[0]) * len(self.starts[1]) * len(self.starts[2])


def axis_starts(length: int, patch: int, stride: int) -> tuple[int, ...]:
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return tuple(starts)


def plan_tiles(dims, patch_size: int, stride: int | None = None) -> TilePlan:
    """Tile starts per axis; axes shorter than the patch are padded symmetrically."""
    if patch_size < 8:
        raise ValueError("patch_size must be >= 8")
    stride = patch_size // 2 if stride is None else int(stride)
    if not 1 <= stride <= patch_size:
        raise ValueError(f"stride must lie in [1, {patch_size}], got {stride}")
    starts, pads = [], []
    for d in dims:
        if d < patch_size:
            total = patch_size - d
            pads.append((total // 2, total - total // 2))
            starts.append((0,))
        else:
            pads.append((0, 0))
            starts.append(axis_starts(d, patch_size, stride))
    return TilePlan(patch_size, stride, tuple(starts), tuple(pads))


def model_predictor(params, cfg: ModelConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Inference-mode forward returning per-voxel probabilities (N, C, ...)."""

    def predict(batch: np.ndarray) -> np.ndarray:
        logits = forward(Tensor(batch.astype(np.float32, copy=False)), params, cfg, training=False)
        return softmax_array(logits.data)

    return predict


def sliding_window_predict(volume: Volume, params=None, cfg: ModelConfig | None = None,
                           patch_size: int = 64, stride: int | None = None,
                           predictor: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Volume:
    """Average tile-wise softmax probabilities into a (C, D, H, W) volume.

    Tiles run sequentially; each voxel's probabilities are divided by the
    number of tiles that covered it, and any padding is cropped away.
    """
    predict = predictor or model_predictor(params, cfg)
    plan = plan_tiles(volume.dims, patch_size, stride)
    x = volume.values.astype(np.float32, copy=False)
    if any(p != (0, 0) for p in plan.pads):
        x = np.pad(x, [(0, 0)] + list(plan.pads), constant_values=x.min())
    P = patch_size
    acc = None
    hits = np.zeros(x.shape[1:], dtype=np.float64)
    for z, y, xx in plan.tiles():
        sl = (slice(z, z + P), slice(y, y + P), slice(xx, xx + P))
        prob = predict(x[(None, slice(None)) + sl])[0]
        if acc is None:
            acc = np.zeros((prob.shape[0],) + x.shape[1:], dtype=np.float64)
        acc[(slice(None),) + sl] += prob
        hits[sl] += 1
    probs = acc / hits
    crop = tuple(slice(lo, lo + d) for (lo, _), d in zip(plan.pads, volume.dims))
    probs = probs[(slice(None),) + crop].astype(np.float32)
    return Volume(np.ascontiguousarray(probs), volume.spacing, "image")


def labels_from_probs(probs: Volume) -> Volume:
    """Per-voxel argmax; ties go to the lowest class index."""
    lab = np.argmax(probs.values, axis=0)
    dt = np.uint8 if probs.channels <= 256 else np.int16
    return Volume(lab.astype(dt)[None], probs.spacing, "label")
