"""Volume files (MVOL), dataset manifests and intensity normalization.

MVOL layout::

    bytes 0-7    b"MVOL0001"
    bytes 8-11   little-endian u32 header length N
    N bytes      UTF-8 JSON header: dims, channels, dtype, spacing, kind
    payload      little-endian samples, channel slowest, then z, y, x
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MVOL0001"

DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {v.newbyteorder("="): k for k, v in DTYPES.items()}


class VolumeFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Volume:
    """A (channels, z, y, x) array with voxel spacing in millimetres.

    ``kind`` is ``"image"`` or ``"label"``; label volumes are single-channel
    integer maps of class ids.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4:
            raise ValueError(f"volume values must be 3-D or 4-D, got shape {v.shape}")
        if v.dtype.newbyteorder("=") not in _DTYPE_NAMES:
            raise ValueError(f"unsupported volume dtype {v.dtype}")
        self.values = v
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.kind not in ("image", "label"):
            raise ValueError(f"kind must be 'image' or 'label', got {self.kind!r}")
        if self.kind == "label" and (v.shape[0] != 1 or v.dtype.kind not in "iu"):
            raise ValueError("label volumes must be single-channel integer maps")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.values.dtype.newbyteorder("=")]

    @property
    def array(self) -> np.ndarray:
        """Spatial array for single-channel volumes, full array otherwise."""
        return self.values[0] if self.channels == 1 else self.values


def label_volume(values, spacing=(1.0, 1.0, 1.0), num_classes: int | None = None) -> Volume:
    v = np.asarray(values)
    if num_classes is not None and v.size and (v.min() < 0 or v.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    dt = np.uint8 if (v.size == 0 or v.max() < 256) and v.min() >= 0 else np.int16
    return Volume(v.astype(dt, copy=False), spacing, "label")


def _header_bytes(v: Volume) -> bytes:
    header = {
        "channels": v.channels,
        "dims": list(v.dims),
        "dtype": v.dtype_name,
        "kind": v.kind,
        "spacing": list(v.spacing),
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_volume(path, v: Volume) -> None:
    head = _header_bytes(v)
    payload = np.ascontiguousarray(v.values, dtype=DTYPES[v.dtype_name]).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise VolumeFormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[8:12])
    if 12 + n > len(raw):
        raise VolumeFormatError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        channels = int(header["channels"])
        dtype = header["dtype"]
        spacing = [float(s) for s in header["spacing"]]
        kind = header["kind"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"{path}: malformed header ({e})") from e
    if len(dims) != 3 or any(d < 1 for d in dims) or channels < 1:
        raise VolumeFormatError(f"{path}: malformed header (dims {dims}, channels {channels})")
    if dtype not in DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype {dtype!r}")
    dt = DTYPES[dtype]
    expected = channels * math.prod(dims) * dt.itemsize
    payload = raw[12 + n :]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: truncated payload, header declares {expected} bytes but {len(payload)} are present"
        )
    values = np.frombuffer(payload, dtype=dt).reshape([channels] + dims).astype(dt.newbyteorder("="))
    try:
        return Volume(values, tuple(spacing), kind)
    except ValueError as e:
        raise VolumeFormatError(f"{path}: {e}") from e


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image: Path
    label: Optional[Path] = None


def read_manifest(path) -> list[ManifestRecord]:
    """Read an ``id,image,label`` CSV. Paths resolve against its directory.

    Missing files are not checked here; :func:`load_record` reports them.
    """
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = reader.fieldnames or []
        for col in ("id", "image"):
            if col not in cols:
                raise ManifestError(f"{path}: missing column {col!r}")
        records, seen = [], set()
        for row in reader:
            sid = (row.get("id") or "").strip()
            if not sid:
                raise ManifestError(f"{path}: empty subject id")
            if sid in seen:
                raise ManifestError(f"{path}: duplicate subject id {sid!r}")
            seen.add(sid)
            label = (row.get("label") or "").strip()
            records.append(
                ManifestRecord(sid, base / row["image"].strip(), base / label if label else None)
            )
    return records


def write_manifest(path, records) -> None:
    """Write records; absolute paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p)
        return Path(os.path.relpath(p, base)).as_posix() if p.is_absolute() else p.as_posix()

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "image", "label"])
        for r in records:
            w.writerow([r.id, rel(r.image), rel(r.label)])


def load_record(rec: ManifestRecord) -> tuple[Volume, Optional[Volume]]:
    for p in (rec.image, rec.label):
        if p is not None and not p.exists():
            raise FileNotFoundError(f"subject {rec.id}: cannot find {p}")
    image = read_volume(rec.image)
    label = read_volume(rec.label) if rec.label is not None else None
    if label is not None and label.dims != image.dims:
        raise ValueError(f"subject {rec.id}: image dims {image.dims} != label dims {label.dims}")
    return image, label


def nearest_rank_percentile(sorted_values: np.ndarray, q: float) -> float:
    n = sorted_values.size
    rank = max(1, math.ceil(q / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


def normalize_intensity(v: Volume, method: str = "zscore", clip=None) -> Volume:
    """Per-channel z-score, optionally after clipping to (lo, hi) percentiles."""
    if method != "zscore":
        raise ValueError(f"unknown normalization {method!r}")
    out = np.empty(v.values.shape, dtype=np.float32)
    for c in range(v.channels):
        x = v.values[c].astype(np.float64)
        if clip is not None:
            s = np.sort(x, axis=None)
            lo, hi = nearest_rank_percentile(s, clip[0]), nearest_rank_percentile(s, clip[1])
            x = np.clip(x, lo, hi)
        mu = x.mean()
        sd = max(x.std(), 1e-8)
        out[c] = (x - mu) / sd
    return Volume(out, v.spacing, "image")
