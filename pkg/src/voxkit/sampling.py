"""Patch extraction and patch-center samplers.

Both center samplers share the signature ``sampler(subject, rng) -> (z, y, x)``
so the training loop can swap them freely.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Tensor
from .volume_io import Volume


@dataclass
class SamplerConfig:
    patch_size: int = 64
    mode: str = "class_balanced"
    seed: int = 0
    foreground_only: bool = False

    def __post_init__(self):
        if self.patch_size < 8 or self.patch_size % 2:
            raise ValueError(f"patch_size must be even and >= 8, got {self.patch_size}")
        if self.mode not in CENTER_SAMPLERS:
            raise ValueError(f"unknown sampler mode {self.mode!r}")


@dataclass
class Subject:
    """An image/label pair plus a lazily built per-class voxel index."""

    id: str
    image: Volume
    label: Volume
    _classes: dict | None = field(default=None, repr=False)

    @property
    def dims(self):
        return self.image.dims

    def class_index(self) -> dict[int, np.ndarray]:
        if self._classes is None:
            flat = self.label.values[0].reshape(-1)
            order = np.argsort(flat, kind="stable")
            ids, starts = np.unique(flat[order], return_index=True)
            bounds = list(starts[1:]) + [flat.size]
            self._classes = {int(c): order[s:e] for c, s, e in zip(ids, starts, bounds)}
        return self._classes


@dataclass
class PatchBatch:
    images: Tensor
    labels: np.ndarray
    provenance: list[tuple[str, tuple[int, int, int]]]


def _pad_to(arr: np.ndarray, size: int, value) -> tuple[np.ndarray, list[int]]:
    """Symmetrically pad the last three axes of ``arr`` up to ``size``."""
    before = []
    widths = [(0, 0)] * (arr.ndim - 3)
    for d in arr.shape[-3:]:
        total = max(size - d, 0)
        before.append(total // 2)
        widths.append((total // 2, total - total // 2))
    if any(w != (0, 0) for w in widths):
        arr = np.pad(arr, widths, constant_values=value)
    return arr, before


def patch_start(center, dims, size: int) -> tuple[int, ...]:
    return tuple(int(min(max(c - size // 2, 0), d - size)) for c, d in zip(center, dims))


def extract_patch(image: Volume, label: Volume | None, center, size: int):
    """Crop a size^3 patch around ``center``.

    Axes shorter than ``size`` are first padded symmetrically (image with its
    minimum, label with 0); the start is then clamped into the volume.
    """
    if label is not None and image.dims != label.dims:
        raise ValueError(f"image dims {image.dims} != label dims {label.dims}")
    img, before = _pad_to(image.values, size, image.values.min())
    c = [int(ci) + b for ci, b in zip(center, before)]
    s = patch_start(c, img.shape[1:], size)
    sl = tuple(slice(a, a + size) for a in s)
    img_patch = img[(slice(None),) + sl]
    lab_patch = None
    if label is not None:
        lab, _ = _pad_to(label.values[0], size, 0)
        lab_patch = lab[sl]
    return img_patch, lab_patch


def sample_center_uniform(subject_or_dims, rng: np.random.Generator):
    dims = subject_or_dims.dims if isinstance(subject_or_dims, Subject) else subject_or_dims
    return tuple(int(rng.integers(0, d)) for d in dims)


def sample_center_class_balanced(subject, rng: np.random.Generator, foreground_only: bool = False):
    """Pick a class uniformly among those present, then one of its voxels."""
    if isinstance(subject, Volume):
        subject = Subject("", subject, subject)
    index = subject.class_index()
    classes = sorted(index)
    if foreground_only and any(c != 0 for c in classes):
        classes = [c for c in classes if c != 0]
    cls = classes[int(rng.integers(0, len(classes)))]
    voxels = index[cls]
    flat = int(voxels[int(rng.integers(0, voxels.size))])
    return tuple(int(i) for i in np.unravel_index(flat, subject.dims))


CENTER_SAMPLERS: dict[str, Callable] = {
    "uniform": sample_center_uniform,
    "class_balanced": sample_center_class_balanced,
}


def make_batch(dataset: Sequence[Subject], cfg: SamplerConfig, n: int, rng: np.random.Generator,
               center_rng: np.random.Generator | None = None) -> PatchBatch:
    """Draw ``n`` patches; subjects uniformly, centers per ``cfg.mode``.

    Subject choice uses ``rng``; centers use ``center_rng`` when given, so two
    samplers fed the same pair of streams visit the same subjects.
    """
    if not dataset:
        raise ValueError("cannot sample from an empty dataset")
    if n < 1:
        raise ValueError("batch size must be >= 1")
    crng = rng if center_rng is None else center_rng
    sampler = CENTER_SAMPLERS[cfg.mode]
    imgs, labs, prov = [], [], []
    for _ in range(n):
        subj = dataset[int(rng.integers(0, len(dataset)))]
        if cfg.mode == "class_balanced":
            center = sampler(subj, crng, cfg.foreground_only)
        else:
            center = sampler(subj, crng)
        ip, lp = extract_patch(subj.image, subj.label, center, cfg.patch_size)
        imgs.append(ip)
        labs.append(lp)
        prov.append((subj.id, center))
    images = np.stack(imgs).astype(np.float32, copy=False)
    return PatchBatch(Tensor(images), np.stack(labs).astype(np.int64), prov)


def batch_stream(dataset, cfg: SamplerConfig, n: int, seed_seq: np.random.SeedSequence,
                 prefetch: int = 0) -> Iterator[PatchBatch]:
    """Endless batch iterator.

    With ``prefetch > 0`` a single producer thread fills a bounded FIFO of
    that capacity; the sequence of batches is the same either way.
    """
    # children derived explicitly: spawn() would mutate the caller's sequence
    subj_seq, center_seq = (
        np.random.SeedSequence(seed_seq.entropy, spawn_key=tuple(seed_seq.spawn_key) + (i,)) for i in range(2)
    )
    rng, crng = np.random.default_rng(subj_seq), np.random.default_rng(center_seq)
    if prefetch <= 0:
        while True:
            yield make_batch(dataset, cfg, n, rng, crng)

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def produce():
        while not stop.is_set():
            b = make_batch(dataset, cfg, n, rng, crng)
            while not stop.is_set():
                try:
                    q.put(b, timeout=0.1)
                    break
                except queue.Full:
                    continue

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    try:
        while True:
            yield q.get()
    finally:
        stop.set()
