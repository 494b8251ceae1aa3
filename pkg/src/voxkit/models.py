"""Residual U-Net and residual FCN for dense 3-D segmentation.

Parameters live in a flat ordered ``dict[str, Tensor]``. Batch-norm moving
statistics are stored alongside the trainable tensors under names ending in
``/moving_mean`` and ``/moving_var`` and never require gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NormState, Tensor

MOVING_SUFFIXES = ("/moving_mean", "/moving_var")


@dataclass
class ModelConfig:
    num_classes: int = 14
    base_filters: int = 16
    num_scales: int = 4
    units_per_scale: int = 1
    arch: str = "unet"
    norm: str = "batch"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_scales < 2:
            raise ValueError("num_scales must be >= 2")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.units_per_scale < 1:
            raise ValueError("units_per_scale must be >= 1")
        if self.arch not in ("unet", "fcn"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.norm not in ("batch", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def filters(self) -> list[int]:
        return [self.base_filters * 2 ** s for s in range(self.num_scales)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_scales - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def is_trainable(name: str) -> bool:
    return not name.endswith(MOVING_SUFFIXES)


# ---------------------------------------------------------------- layer list

def _unit_layers(prefix, cin, cout, stride, norm):
    out = []
    if norm == "batch":
        out.append((prefix + "/bn1", "bn", cin))
    out.append((prefix + "/conv1", "conv", (cout, cin, 3)))
    if norm == "batch":
        out.append((prefix + "/bn2", "bn", cout))
    out.append((prefix + "/conv2", "conv", (cout, cout, 3)))
    if cin != cout or stride != 1:
        out.append((prefix + "/shortcut", "conv", (cout, cin, 1)))
    return out


def _encoder_units(cfg: ModelConfig):
    """(prefix, in_ch, out_ch, stride) for every encoder unit, by scale."""
    f = cfg.filters
    scales = []
    for s in range(cfg.num_scales):
        units = []
        for u in range(cfg.units_per_scale):
            cin = (f[s - 1] if s else f[0]) if u == 0 else f[s]
            stride = 2 if (s > 0 and u == 0) else 1
            units.append((f"enc{s}/unit{u}", cin, f[s], stride))
        scales.append(units)
    return scales


def layer_list(cfg: ModelConfig):
    """Ordered (name, kind, shape-info) description of every layer."""
    f = cfg.filters
    layers = [("init/conv", "conv", (f[0], 1, 3))]
    for units in _encoder_units(cfg):
        for prefix, cin, cout, stride in units:
            layers += _unit_layers(prefix, cin, cout, stride, cfg.norm)
    C = cfg.num_classes
    if cfg.arch == "unet":
        for s in range(cfg.num_scales - 2, -1, -1):
            layers.append((f"dec{s}/up", "upconv", (f[s + 1], f[s], 2)))
            layers += _unit_layers(f"dec{s}/unit", 2 * f[s], f[s], 1, cfg.norm)
        layers.append(("head/conv", "conv", (C, f[0], 1)))
    else:
        for s in range(cfg.num_scales):
            layers.append((f"score{s}/conv", "conv", (C, f[s], 1)))
        for s in range(cfg.num_scales - 2, -1, -1):
            layers.append((f"up{s}", "upconv", (C, C, 2)))
    return layers


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, kind, info in layer_list(cfg):
        if kind == "conv":
            cout, cin, k = info
            shapes[name + "/w"] = (cout, cin, k, k, k)
            shapes[name + "/b"] = (cout,)
        elif kind == "upconv":
            cin, cout, k = info
            shapes[name + "/w"] = (cin, cout, k, k, k)
            shapes[name + "/b"] = (cout,)
        else:
            for suffix in ("/gamma", "/beta") + MOVING_SUFFIXES:
                shapes[name + suffix] = (info,)
    return shapes


def build_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """He-normal weights, zero biases, unit gamma, zero beta, (0, 1) statistics.

    Fan-in is Cin * k^3 for convolutions and Cin for the k == stride
    upsampling (each output voxel sees one input voxel per channel).
    """
    fan_in = {}
    for name, kind, info in layer_list(cfg):
        if kind == "conv":
            fan_in[name + "/w"] = info[1] * info[2] ** 3
        elif kind == "upconv":
            fan_in[name + "/w"] = info[0]
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit("/", 1)[1]
        if leaf == "w":
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in[name]), size=shape)
        elif leaf in ("gamma", "moving_var"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=is_trainable(name), name=name)
    return params


def count_parameters(params: dict[str, Tensor], trainable_only: bool = True) -> int:
    return sum(t.size for n, t in params.items() if is_trainable(n) or not trainable_only)


# ---------------------------------------------------------------- blocks

def _conv(x, params, name, stride=1):
    return ad.conv3d(x, params[name + "/w"], params[name + "/b"], stride=stride)


def _norm_relu(x, params, name, norm, training):
    if norm == "batch":
        state = NormState(params[name + "/moving_mean"], params[name + "/moving_var"])
        x = ad.batch_norm(x, params[name + "/gamma"], params[name + "/beta"], state, training)
        if training:
            params[name + "/moving_mean"] = _keep_flags(state.mean, params[name + "/moving_mean"])
            params[name + "/moving_var"] = _keep_flags(state.var, params[name + "/moving_var"])
    return ad.relu(x)


def _keep_flags(new: Tensor, old: Tensor) -> Tensor:
    new.name = old.name
    return new


def residual_unit(x: Tensor, params, prefix: str, in_ch: int, out_ch: int, stride: int = 1,
                  norm: str = "batch", training: bool = False) -> Tensor:
    """Pre-activation unit: (norm, relu, conv stride) -> (norm, relu, conv) + shortcut."""
    if x.shape[1] != in_ch:
        raise ad.ShapeError(f"{prefix}: expected {in_ch} input channels, got {x.shape[1]}")
    h = _norm_relu(x, params, prefix + "/bn1", norm, training)
    h = _conv(h, params, prefix + "/conv1", stride)
    h = _norm_relu(h, params, prefix + "/bn2", norm, training)
    h = _conv(h, params, prefix + "/conv2")
    if in_ch == out_ch and stride == 1:
        shortcut = x
    else:
        shortcut = _conv(x, params, prefix + "/shortcut", stride)
    return ad.add(h, shortcut)


def _check_input(x: Tensor, params, cfg: ModelConfig):
    if x.ndim != 5 or x.shape[1] != 1:
        raise ad.ShapeError(f"model input must be (N, 1, z, y, x), got {x.shape}")
    bad = [d for d in x.shape[2:] if d % cfg.divisor]
    if bad:
        raise ValueError(
            f"spatial dims {x.shape[2:]} must be divisible by 2^(num_scales-1) = {cfg.divisor}"
        )
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise KeyError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ad.ShapeError(f"parameter {name} has shape {params[name].shape}, config expects {shape}")


def encode(x: Tensor, params, cfg: ModelConfig, training: bool) -> list[Tensor]:
    h = _conv(x, params, "init/conv")
    feats = []
    for units in _encoder_units(cfg):
        for prefix, cin, cout, stride in units:
            h = residual_unit(h, params, prefix, cin, cout, stride, cfg.norm, training)
        feats.append(h)
    return feats


def unet_forward(x: Tensor, params, cfg: ModelConfig, training: bool = False) -> Tensor:
    _check_input(x, params, cfg)
    feats = encode(x, params, cfg, training)
    f = cfg.filters
    h = feats[-1]
    for s in range(cfg.num_scales - 2, -1, -1):
        h = ad.transposed_conv3d(h, params[f"dec{s}/up/w"], params[f"dec{s}/up/b"], stride=2)
        h = ad.concat_channels(h, feats[s])
        h = residual_unit(h, params, f"dec{s}/unit", 2 * f[s], f[s], 1, cfg.norm, training)
    return _conv(h, params, "head/conv")


def fcn_forward(x: Tensor, params, cfg: ModelConfig, training: bool = False) -> Tensor:
    _check_input(x, params, cfg)
    feats = encode(x, params, cfg, training)
    scores = [_conv(h, params, f"score{s}/conv") for s, h in enumerate(feats)]
    out = scores[-1]
    for s in range(cfg.num_scales - 2, -1, -1):
        out = ad.transposed_conv3d(out, params[f"up{s}/w"], params[f"up{s}/b"], stride=2)
        out = ad.add(out, scores[s])
    return out


def forward(x: Tensor, params, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Dispatch on ``cfg.arch``; both architectures share this signature."""
    fn = unet_forward if cfg.arch == "unet" else fcn_forward
    return fn(x, params, cfg, training)
