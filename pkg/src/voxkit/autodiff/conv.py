"""3-D convolution kernels on raw arrays.

Two forward paths exist. ``conv3d_direct`` loops over output voxels and is
the reference; ``conv3d_gemm`` lowers the input to columns chunk by chunk
(so each column block stays cache resident) and multiplies by the weight
matrix. Gradients are always computed with the GEMM machinery.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# target size of one column block, in elements
_CHUNK_ELEMS = 1 << 18


def same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    return (size - k) // stride + 1


def pad_amounts(spatial, k: int, stride: int, padding: str):
    if padding == "same":
        return [same_pads(s, k, stride) for s in spatial]
    return [(0, 0)] * 3


def _pad(x: np.ndarray, pads) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 3) + list(pads))


def _windows(xp: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    """Strided view (Cin, k, k, k, Do, Ho, Wo) over one padded sample."""
    v = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    v = v[:, :: stride, :: stride, :: stride][:, : out_dims[0], : out_dims[1], : out_dims[2]]
    return v.transpose(0, 4, 5, 6, 1, 2, 3)


def _chunks(out_dims, depth: int):
    """Yield (z-slice, y-slice) blocks of roughly _CHUNK_ELEMS column entries."""
    Do, Ho, Wo = out_dims
    per = max(1, _CHUNK_ELEMS // max(depth, 1))
    if Ho * Wo <= per:
        zs = max(1, per // (Ho * Wo))
        for z0 in range(0, Do, zs):
            yield slice(z0, min(z0 + zs, Do)), slice(0, Ho)
    else:
        ys = max(1, per // Wo)
        for z in range(Do):
            for y0 in range(0, Ho, ys):
                yield slice(z, z + 1), slice(y0, min(y0 + ys, Ho))


def conv3d_gemm(x: np.ndarray, w: np.ndarray, b, stride: int, pads) -> np.ndarray:
    N, Cin = x.shape[:2]
    Cout, _, k = w.shape[:3]
    xp = _pad(x, pads)
    out_dims = tuple((xp.shape[2 + i] - k) // stride + 1 for i in range(3))
    out = np.empty((N, Cout) + out_dims, dtype=x.dtype)
    wm = w.reshape(Cout, -1)
    depth = wm.shape[1]
    for n in range(N):
        v = _windows(xp[n], k, stride, out_dims)
        for zs, ys in _chunks(out_dims, depth):
            cols = np.ascontiguousarray(v[:, :, :, :, zs, ys, :])
            shape = cols.shape[4:]
            out[n, :, zs, ys, :] = (wm @ cols.reshape(depth, -1)).reshape((Cout,) + shape)
    if b is not None:
        out += b.reshape(1, Cout, 1, 1, 1)
    return out


def conv3d_direct(x: np.ndarray, w: np.ndarray, b, stride: int, pads) -> np.ndarray:
    N = x.shape[0]
    Cout, _, k = w.shape[:3]
    xp = _pad(x, pads)
    Do, Ho, Wo = ((xp.shape[2 + i] - k) // stride + 1 for i in range(3))
    out = np.empty((N, Cout, Do, Ho, Wo), dtype=x.dtype)
    for n in range(N):
        for z in range(Do):
            for y in range(Ho):
                for xx in range(Wo):
                    patch = xp[n, :, z * stride : z * stride + k, y * stride : y * stride + k,
                               xx * stride : xx * stride + k]
                    out[n, :, z, y, xx] = np.tensordot(w, patch, axes=4)
    if b is not None:
        out += b.reshape(1, Cout, 1, 1, 1)
    return out


def conv3d_weight_grad(x: np.ndarray, gy: np.ndarray, k: int, stride: int, pads) -> np.ndarray:
    N, Cin = x.shape[:2]
    Cout = gy.shape[1]
    out_dims = gy.shape[2:]
    xp = _pad(x, pads)
    depth = Cin * k ** 3
    gw = np.zeros((Cout, depth), dtype=x.dtype)
    for n in range(N):
        v = _windows(xp[n], k, stride, out_dims)
        for zs, ys in _chunks(out_dims, depth):
            cols = np.ascontiguousarray(v[:, :, :, :, zs, ys, :]).reshape(depth, -1)
            gw += gy[n, :, zs, ys, :].reshape(Cout, -1) @ cols.T
    return gw.reshape(Cout, Cin, k, k, k)


def conv3d_input_grad(gy: np.ndarray, w: np.ndarray, in_shape, stride: int, pads) -> np.ndarray:
    N, Cin = in_shape[:2]
    Cout, _, k = w.shape[:3]
    spatial = in_shape[2:]
    if stride == 1:
        # correlation of the output cotangent with the flipped, transposed kernel
        wf = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        back = [(k - 1 - lo, k - 1 - hi) for lo, hi in pads]
        if all(lo >= 0 and hi >= 0 for lo, hi in back):
            return conv3d_gemm(gy, wf, None, 1, back)
    # column scatter (col2im)
    padded = [spatial[i] + pads[i][0] + pads[i][1] for i in range(3)]
    gxp = np.zeros((N, Cin) + tuple(padded), dtype=gy.dtype)
    wm = w.reshape(Cout, -1).T
    Do, Ho, Wo = gy.shape[2:]
    for n in range(N):
        cols = (wm @ gy[n].reshape(Cout, -1)).reshape(Cin, k, k, k, Do, Ho, Wo)
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    gxp[n, :, a : a + stride * (Do - 1) + 1 : stride,
                        bb : bb + stride * (Ho - 1) + 1 : stride,
                        c : c + stride * (Wo - 1) + 1 : stride] += cols[:, a, bb, c]
    lo = [p[0] for p in pads]
    return np.ascontiguousarray(
        gxp[:, :, lo[0] : lo[0] + spatial[0], lo[1] : lo[1] + spatial[1], lo[2] : lo[2] + spatial[2]]
    )


def upconv3d(x: np.ndarray, w: np.ndarray, b, stride: int) -> np.ndarray:
    """Transposed convolution with kernel == stride (non-overlapping scatter)."""
    N, C, D, H, W = x.shape
    Cout, k = w.shape[1], w.shape[2]
    wm = w.reshape(C, -1).T  # (Cout*k^3, C)
    out = np.empty((N, Cout, D * k, H * k, W * k), dtype=x.dtype)
    for n in range(N):
        blocks = (wm @ x[n].reshape(C, -1)).reshape(Cout, k, k, k, D, H, W)
        out[n] = blocks.transpose(0, 4, 1, 5, 2, 6, 3).reshape(Cout, D * k, H * k, W * k)
    if b is not None:
        out += b.reshape(1, Cout, 1, 1, 1)
    return out


def upconv3d_grads(x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int):
    N, C, D, H, W = x.shape
    Cout, k = w.shape[1], w.shape[2]
    wm = w.reshape(C, -1)
    gx = np.empty_like(x)
    gw = np.zeros_like(wm)
    for n in range(N):
        g = gy[n].reshape(Cout, D, k, H, k, W, k).transpose(0, 2, 4, 6, 1, 3, 5)
        g = np.ascontiguousarray(g).reshape(Cout * k ** 3, -1)
        xn = x[n].reshape(C, -1)
        gx[n] = (wm @ g).reshape(C, D, H, W)
        gw += xn @ g.T
    return gx, gw.reshape(w.shape)
