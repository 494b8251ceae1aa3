"""ADAM, the training loop, validation and checkpoint files.

Checkpoint layout::

    bytes 0-7    b"MCKP0001"
    bytes 8-11   little-endian u32 header length N
    N bytes      UTF-8 JSON header (version, step, configs, tensor directory, crc32)
    payload      concatenated little-endian tensors, offsets relative to payload start
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Record, Tensor
from .inference import labels_from_probs, sliding_window_predict
from .losses import LossConfig, compute_loss
from .metrics import SubjectMetrics, mean_foreground_dsc, subject_metrics
from .models import ModelConfig, build_params, forward, is_trainable, param_shapes
from .sampling import SamplerConfig, Subject, batch_stream
from .volume_io import load_record, normalize_intensity, read_manifest

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MCKP0001"
CKPT_VERSION = 1
_DT = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class TrainHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-5
    max_steps: int = 500
    batch_size: int = 4
    val_every: int = 50
    seed: int = 0
    prefetch: int = 0

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 0 or self.batch_size < 1 or self.val_every < 0:
            raise ValueError("max_steps >= 0, batch_size >= 1 and val_every >= 0 are required")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              h: TrainHyper) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected ADAM update, applied to every parameter in ``grads``.

    The step is refused as a whole if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient of {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - h.beta1 ** t
    c2 = 1.0 - h.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = h.beta1 * m + (1.0 - h.beta1) * g
        v = h.beta2 * v + (1.0 - h.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = h.learning_rate * (m / c1) / (np.sqrt(v / c2) + h.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    adam: AdamState
    hyper: TrainHyper
    model_config: ModelConfig
    step: int = 0
    best_val_dsc: Optional[float] = None
    extra: dict = field(default_factory=dict)


def _dtype_name(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "f32"
    if a.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"cannot store dtype {a.dtype}")


def _tensor_items(c: Checkpoint):
    for name, t in c.params.items():
        yield "param/" + name, t.data
    for name in sorted(c.adam.m):
        yield "adam_m/" + name, c.adam.m[name]
        yield "adam_v/" + name, c.adam.v[name]


def save_checkpoint(path, c: Checkpoint) -> None:
    directory, chunks, offset = [], [], 0
    for name, arr in _tensor_items(c):
        dt = _dtype_name(arr)
        b = np.ascontiguousarray(arr, dtype=_DT[dt]).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                          "offset": offset, "length": len(b)})
        chunks.append(b)
        offset += len(b)
    payload = b"".join(chunks)
    header = {
        "version": CKPT_VERSION,
        "step": c.step,
        "best_val_dsc": c.best_val_dsc,
        "adam_t": c.adam.t,
        "model_config": c.model_config.to_dict(),
        "hyper": asdict(c.hyper),
        "extra": c.extra,
        "tensors": directory,
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(payload)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint, verifying magic, version, size, checksum and shapes.

    With ``expected`` the stored model config must produce the same
    parameter shapes, otherwise :class:`ShapeMismatchError` is raised.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[8:12])
    if 12 + n > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from e
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = raw[12 + n :]
    declared = sum(e["length"] for e in header["tensors"])
    if len(payload) != declared:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {declared} bytes)")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    cfg = ModelConfig(**header["model_config"])
    hyper = TrainHyper(**header["hyper"])
    params, adam = {}, AdamState(t=header["adam_t"])
    for e in header["tensors"]:
        dt = _DT[e["dtype"]]
        arr = np.frombuffer(payload, dtype=dt, count=e["length"] // dt.itemsize, offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=is_trainable(name), name=name)
        elif kind == "adam_m":
            adam.m[name] = arr
        elif kind == "adam_v":
            adam.v[name] = arr

    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        raise ShapeMismatchError(f"{path}: stored tensors do not match the stored model config")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {params[name].shape}, config declares {shape}")
    if expected is not None:
        want = param_shapes(expected)
        for name, shape in want.items():
            got = params.get(name)
            if got is None or got.shape != shape:
                raise ShapeMismatchError(
                    f"{path}: parameter {name} shape {None if got is None else got.shape} "
                    f"does not match requested config {shape} "
                    f"(num_classes {cfg.num_classes} vs {expected.num_classes})"
                )
        if set(want) != set(params):
            raise ShapeMismatchError(f"{path}: parameter set differs from requested config")
    return Checkpoint(params, adam, hyper, cfg, header["step"], header["best_val_dsc"],
                      header.get("extra", {}))


# ---------------------------------------------------------------- data

def load_subjects(manifest, normalization: dict | None = None, require_labels: bool = True) -> list[Subject]:
    norm = normalization or {}
    subjects = []
    for rec in read_manifest(manifest):
        image, label = load_record(rec)
        if label is None and require_labels:
            raise ValueError(f"subject {rec.id} has no label")
        image = normalize_intensity(image, norm.get("method", "zscore"), norm.get("clip"))
        subjects.append(Subject(rec.id, image, label))
    if not subjects:
        raise ValueError(f"manifest {manifest} is empty")
    return subjects


def validate(params, cfg: ModelConfig, subjects: Sequence[Subject], patch_size: int = 64,
             stride: int | None = None, predictor=None) -> list[SubjectMetrics]:
    """Whole-volume sliding-window prediction scored per subject and class."""
    out = []
    for s in subjects:
        probs = sliding_window_predict(s.image, params, cfg, patch_size, stride, predictor=predictor)
        pred = labels_from_probs(probs)
        out.append(subject_metrics(s.id, pred.values, s.label.values, cfg.num_classes))
    return out


# ---------------------------------------------------------------- loop

@dataclass
class HistoryRow:
    step: int
    train_loss: float
    val_mean_dsc: Optional[float] = None


def write_history(path, rows: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_mean_dsc"])
        for r in rows:
            w.writerow([r.step, repr(float(r.train_loss)),
                        "" if r.val_mean_dsc is None else repr(float(r.val_mean_dsc))])


class Trainer:
    """Owns parameters and optimizer state for one run.

    ``step()`` performs one sample/forward/loss/backward/update cycle;
    ``run()`` drives ``max_steps`` of them with periodic validation.
    """

    def __init__(self, model_cfg: ModelConfig, loss_cfg: LossConfig, sampler_cfg: SamplerConfig,
                 hyper: TrainHyper, train_subjects: Sequence[Subject],
                 val_subjects: Sequence[Subject] = (), stride: int | None = None,
                 extra: dict | None = None):
        if not train_subjects:
            raise ValueError("training set is empty")
        bad = sampler_cfg.patch_size % model_cfg.divisor
        if bad:
            raise ValueError(
                f"patch_size {sampler_cfg.patch_size} is not divisible by 2^(num_scales-1) = {model_cfg.divisor}"
            )
        self.model_cfg, self.loss_cfg, self.sampler_cfg, self.hyper = model_cfg, loss_cfg, sampler_cfg, hyper
        self.train_subjects = list(train_subjects)
        self.val_subjects = list(val_subjects)
        self.stride = stride
        self.params = build_params(model_cfg, np.random.default_rng(hyper.seed))
        self.adam = AdamState()
        self.step_count = 0
        self.history: list[HistoryRow] = []
        self.best_val: Optional[float] = None
        self.extra = dict(extra or {})
        self.extra.setdefault("sampler", asdict(sampler_cfg))
        self.extra.setdefault("loss", loss_cfg.to_dict())
        self._batches = batch_stream(self.train_subjects, sampler_cfg, hyper.batch_size,
                                     np.random.SeedSequence(sampler_cfg.seed), prefetch=hyper.prefetch)

    def step(self) -> float:
        batch = next(self._batches)
        for name, p in self.params.items():
            p.grad = None
        with Record() as rec:
            logits = forward(batch.images, self.params, self.model_cfg, training=True)
            loss = compute_loss(logits, batch.labels, self.loss_cfg)
        value = float(loss.data[0])
        self.step_count += 1
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {self.step_count}")
        rec.backward(loss)
        del logits, rec
        grads = {n: p.grad for n, p in self.params.items() if is_trainable(n) and p.grad is not None}
        adam_step(self.params, grads, self.adam, self.hyper)
        self.history.append(HistoryRow(self.step_count, value))
        return value

    def validate(self) -> tuple[Optional[float], list[SubjectMetrics]]:
        metrics = validate(self.params, self.model_cfg, self.val_subjects,
                           self.sampler_cfg.patch_size, self.stride)
        return mean_foreground_dsc(metrics, "subject"), metrics

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params, self.adam, self.hyper, self.model_cfg, self.step_count,
                          self.best_val, self.extra)

    def run(self, out_dir=None, on_step: Callable[["Trainer", HistoryRow], None] | None = None):
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        h = self.hyper
        while self.step_count < h.max_steps:
            loss = self.step()
            row = self.history[-1]
            last = self.step_count == h.max_steps
            if self.val_subjects and ((h.val_every and self.step_count % h.val_every == 0) or last):
                dsc, _ = self.validate()
                row.val_mean_dsc = 0.0 if dsc is None else dsc
                log.info("step %d loss %.5f val dsc %.4f", self.step_count, loss, row.val_mean_dsc)
                if self.best_val is None or row.val_mean_dsc > self.best_val:
                    self.best_val = row.val_mean_dsc
                    if out is not None:
                        save_checkpoint(out / "best.mckp", self.checkpoint())
            if on_step is not None:
                on_step(self, row)
        if out is not None:
            write_history(out / "history.csv", self.history)
            save_checkpoint(out / "last.mckp", self.checkpoint())
            if not (out / "best.mckp").exists():
                save_checkpoint(out / "best.mckp", self.checkpoint())
        return self.checkpoint(), self.history


def train(model_cfg: ModelConfig, loss_cfg: LossConfig, sampler_cfg: SamplerConfig, hyper: TrainHyper,
          train_manifest, val_manifest, out_dir, normalization: dict | None = None,
          stride: int | None = None):
    """Load both manifests, train, and write checkpoints plus ``history.csv``."""
    train_subjects = load_subjects(train_manifest, normalization)
    val_subjects = load_subjects(val_manifest, normalization) if val_manifest else []
    extra = {"normalization": normalization or {"method": "zscore", "clip": None}}
    trainer = Trainer(model_cfg, loss_cfg, sampler_cfg, hyper, train_subjects, val_subjects,
                      stride=stride, extra=extra)
    return trainer.run(out_dir)
