"""Labelled phantom volumes: noisy background with analytic spheres/cuboids."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import ManifestRecord, Volume, write_manifest, write_volume


class PlacementError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    num_foreground_classes: int = 3
    shapes: tuple[str, ...] = ("sphere", "cuboid", "sphere")
    radius_range: tuple[int, int] = (6, 10)
    intensity_means: tuple[float, ...] = (2.0, 4.0, -2.0)
    intensity_stds: tuple[float, ...] = (0.0, 0.0, 0.0)
    background_mean: float = 0.0
    noise_std: float = 0.5
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        k = self.num_foreground_classes
        if k < 1:
            raise ValueError("num_foreground_classes must be >= 1")
        for name in ("shapes", "intensity_means", "intensity_stds"):
            if len(getattr(self, name)) < k:
                raise ValueError(f"{name} needs one entry per foreground class ({k})")
        if any(s not in ("sphere", "cuboid") for s in self.shapes[:k]):
            raise ValueError("shapes must be 'sphere' or 'cuboid'")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise ValueError("radius_range must satisfy 1 <= lo <= hi")
        if any(2 * hi + 1 > d for d in self.dims):
            raise ValueError(f"shapes of radius {hi} do not fit inside dims {self.dims}")
        means = [self.background_mean] + list(self.intensity_means[:k])
        gap = 2 * self.noise_std
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                if abs(means[i] - means[j]) < gap:
                    raise ValueError("class intensity means must be separated by >= 2x noise std")


def shape_mask(kind: str, center, radius: int, dims) -> np.ndarray:
    z, y, x = np.ogrid[: dims[0], : dims[1], : dims[2]]
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    if kind == "sphere":
        return dz * dz + dy * dy + dx * dx <= radius * radius
    return (np.abs(dz) <= radius) & (np.abs(dy) <= radius) & (np.abs(dx) <= radius)


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator | None = None):
    """Return (image Volume, label Volume). Objects never overlap."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    dims = tuple(spec.dims)
    label = np.zeros(dims, dtype=np.uint8)
    mean = np.full(dims, spec.background_mean, dtype=np.float64)
    extra_std = np.zeros(dims, dtype=np.float64)
    occupied = np.zeros(dims, dtype=bool)
    for c in range(spec.num_foreground_classes):
        kind = spec.shapes[c]
        for _ in range(1000):
            r = int(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
            center = tuple(int(rng.integers(r, d - r)) for d in dims)
            mask = shape_mask(kind, center, r, dims)
            # one voxel of clearance between objects
            grown = shape_mask(kind, center, r + 1, dims)
            if not (grown & occupied).any():
                break
        else:
            raise PlacementError(f"could not place class {c + 1} after 1000 attempts in dims {dims}")
        occupied |= mask
        label[mask] = c + 1
        mean[mask] = spec.intensity_means[c]
        extra_std[mask] = spec.intensity_stds[c]
    noise = rng.standard_normal(dims) * spec.noise_std
    texture = rng.standard_normal(dims) * extra_std
    image = (mean + noise + texture).astype(np.float32)
    return Volume(image[None], spec.spacing, "image"), Volume(label[None], spec.spacing, "label")


def generate_dataset(spec: PhantomSpec, n_train: int, n_val: int, out_dir) -> tuple[Path, Path]:
    """Write MVOL pairs plus ``train.csv`` and ``val.csv`` manifests.

    Each subject gets its own child seed spawned from ``spec.seed``.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(spec.seed).spawn(n_train + n_val)
    manifests = []
    k = 0
    for split, n in (("train", n_train), ("val", n_val)):
        records = []
        for i in range(n):
            sid = f"{split}{i:03d}"
            image, label = generate_phantom(spec, np.random.default_rng(children[k]))
            k += 1
            write_volume(out / f"{sid}_image.mvol", image)
            write_volume(out / f"{sid}_label.mvol", label)
            records.append(ManifestRecord(sid, Path(f"{sid}_image.mvol"), Path(f"{sid}_label.mvol")))
        path = out / f"{split}.csv"
        write_manifest(path, records)
        manifests.append(path)
    return manifests[0], manifests[1]
