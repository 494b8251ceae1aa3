"""Differentiable operations on :class:`Tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field
from numbers import Number

import numpy as np

from . import conv as _k
from .tensor import Tensor, as_tensor, record_op


class ShapeError(ValueError):
    pass


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} expects a 5-D (N, C, z, y, x) tensor, got shape {x.shape}")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same", impl: str = "gemm") -> Tensor:
    """3-D cross-correlation. ``w`` has shape (Cout, Cin, k, k, k)."""
    _check_5d(x, "conv3d")
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ShapeError(f"conv3d weight must be (Cout, Cin, k, k, k), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias must have shape ({w.shape[0]},), got {b.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv3d stride must be a positive integer, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    k = w.shape[2]
    if padding == "same" and k % 2 == 0:
        raise ValueError("same padding requires an odd kernel size")
    if padding == "valid" and any(k > s for s in x.shape[2:]):
        raise ShapeError(f"valid padding with kernel {k} larger than input {x.shape[2:]}")

    pads = _k.pad_amounts(x.shape[2:], k, stride, padding)
    fwd = _k.conv3d_gemm if impl == "gemm" else _k.conv3d_direct
    out = fwd(x.data, w.data, None if b is None else b.data, stride, pads)
    xd, wd, in_shape = x.data, w.data, x.shape

    def vjp(g):
        gx = _k.conv3d_input_grad(g, wd, in_shape, stride, pads) if x.requires_grad else None
        gw = _k.conv3d_weight_grad(xd, g, k, stride, pads) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv3d", inputs, out, vjp)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Learnable upsampling; ``w`` has shape (C, Cout, k, k, k) with k == stride."""
    _check_5d(x, "transposed_conv3d")
    if w.ndim != 5 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"transposed_conv3d weight {w.shape} does not match input channels {x.shape[1]}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k != stride:
        raise ValueError(f"transposed_conv3d requires kernel == stride, got kernel {w.shape[2:]} and stride {stride}")
    if stride < 2:
        raise ValueError("transposed_conv3d stride must be >= 2")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"transposed_conv3d bias must have shape ({w.shape[1]},)")
    out = _k.upconv3d(x.data, w.data, None if b is None else b.data, stride)
    xd, wd = x.data, w.data

    def vjp(g):
        gx, gw = _k.upconv3d_grads(xd, wd, g, stride)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("transposed_conv3d", inputs, out, vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return record_op("relu", (x,), out, vjp)


@dataclass
class NormState:
    """Moving per-channel statistics of a batch-norm layer."""

    mean: Tensor
    var: Tensor
    momentum: float = 0.9
    eps: float = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: NormState, training: bool) -> Tensor:
    """Batch normalization over (N, z, y, x) per channel.

    In training mode the batch statistics are used and ``state`` moving
    averages are replaced by ``momentum * old + (1 - momentum) * batch``.
    """
    _check_5d(x, "batch_norm")
    C = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("moving mean", state.mean), ("moving var", state.var)):
        if t.shape != (C,):
            raise ShapeError(f"batch_norm {name} must have shape ({C},), got {t.shape}")
    if state.eps <= 0:
        raise ValueError("batch_norm eps must be > 0")
    N = x.shape[0]
    xr = x.data.reshape(N, C, -1)
    m = xr.shape[0] * xr.shape[2]
    if training:
        mu = xr.mean(axis=(0, 2), dtype=np.float64)
        xc = xr - mu.astype(x.dtype)[None, :, None]
        var = np.einsum("ncv,ncv->c", xc, xc, dtype=np.float64) / m
        mom = state.momentum
        state.mean = Tensor((mom * state.mean.data + (1 - mom) * mu).astype(state.mean.dtype))
        state.var = Tensor((mom * state.var.data + (1 - mom) * var).astype(state.var.dtype))
    else:
        mu = state.mean.data.astype(np.float64)
        var = state.var.data.astype(np.float64)
        xc = xr - mu.astype(x.dtype)[None, :, None]
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = xc * invstd[None, :, None]
    out = (xhat * gamma.data[None, :, None] + beta.data[None, :, None]).reshape(x.shape)
    gd = gamma.data

    def vjp(gout):
        g = gout.reshape(N, C, -1)
        gbeta = g.sum(axis=(0, 2))
        ggamma = np.einsum("ncv,ncv->c", g, xhat)
        gxhat = g * gd[None, :, None]
        if training:
            s1 = gxhat.sum(axis=(0, 2))
            s2 = np.einsum("ncv,ncv->c", gxhat, xhat)
            gx = (gxhat - (s1 / m)[None, :, None] - xhat * (s2 / m)[None, :, None]) * invstd[None, :, None]
        else:
            gx = gxhat * invstd[None, :, None]
        return gx.reshape(x.shape), ggamma, gbeta

    return record_op("batch_norm", (x, gamma, beta), out, vjp)


def softmax_channels(x: Tensor) -> Tensor:
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError("softmax_channels needs at least two channels on axis 1")
    p = softmax_array(x.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record_op("softmax_channels", (x,), p, vjp)


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return e


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def concat_channels(*xs: Tensor) -> Tensor:
    if len(xs) < 1:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: non-channel dims differ, {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record_op("concat_channels", xs, out, vjp)


def _binary_operands(a, b):
    a_t = as_tensor(a) if not isinstance(a, Number) else None
    b_t = as_tensor(b) if not isinstance(b, Number) else None
    if a_t is None and b_t is None:
        raise TypeError("at least one operand must be a Tensor")
    if a_t is None:
        a_t = Tensor(np.asarray(a, dtype=b_t.dtype))
    if b_t is None:
        b_t = Tensor(np.asarray(b, dtype=a_t.dtype))
    if a_t.shape != b_t.shape and a_t.size != 1 and b_t.size != 1:
        raise ShapeError(f"elementwise ops need identical shapes (or a scalar), got {a_t.shape} and {b_t.shape}")
    return a_t, b_t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return record_op("mul", (a, b), out, vjp)


def elementwise(op: str, a, b) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def _norm_axes(axes, ndim):
    if axes is None or axes == "all":
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} is out of range for a {ndim}-D tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(x: Tensor, op: str = "sum", axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes)
    if op == "mean":
        out = out / count
    out = np.asarray(out, dtype=x.dtype)
    if out.ndim == 0:
        out = out.reshape(1)
    shape = x.shape
    kept = [1 if i in axes else s for i, s in enumerate(shape)]

    def vjp(g):
        gg = g.reshape(kept)
        if op == "mean":
            gg = gg / count
        return (np.broadcast_to(gg, shape).astype(x.dtype),)

    return record_op("reduce_" + op, (x,), out, vjp)


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axes)


def mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "mean", axes)
