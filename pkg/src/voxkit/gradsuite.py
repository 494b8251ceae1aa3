"""Finite-difference checks over every differentiable piece of the toolkit.

Each item builds a small float64 problem, reduces the output against a
fixed random weighting to a scalar, and compares analytic and central
difference gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, models
from .autodiff import NormState, Tensor, grad_check

TOLERANCE = 1e-4
STEP = 1e-4


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    passed: bool
    skipped: int = 0


def _t(rng, shape, away_from_zero=False):
    a = rng.standard_normal(shape)
    if away_from_zero:
        a = np.sign(a) * (np.abs(a) + 0.1)
    return Tensor(a, requires_grad=True)


def _micro_model(arch, rng):
    cfg = models.ModelConfig(num_classes=3, base_filters=2, num_scales=2, arch=arch, norm="none")
    params = models.build_params(cfg, rng, dtype=np.float64)
    for name, p in params.items():
        if name.endswith("/b"):
            p.data = rng.standard_normal(p.shape) * 0.1
    x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)))
    return cfg, params, x


def _items(rng) -> list[tuple[str, Callable[[], Tensor], dict]]:
    items = []

    x, w, b = _t(rng, (2, 3, 6, 5, 4)), _t(rng, (4, 3, 3, 3, 3)), _t(rng, (4,))
    r = Tensor(rng.standard_normal((2, 4, 6, 5, 4)))
    items.append(("conv3d", lambda: ad.sum(ad.mul(ad.conv3d(x, w, b), r)), {"x": x, "w": w, "b": b}))

    x2, w2, b2 = _t(rng, (2, 2, 6, 6, 6)), _t(rng, (3, 2, 3, 3, 3)), _t(rng, (3,))
    r2 = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))
    items.append(("conv3d_stride2", lambda: ad.sum(ad.mul(ad.conv3d(x2, w2, b2, stride=2), r2)),
                  {"x": x2, "w": w2, "b": b2}))

    r3 = Tensor(rng.standard_normal((2, 4, 4, 3, 2)))
    items.append(("conv3d_valid", lambda: ad.sum(ad.mul(ad.conv3d(x, w, b, padding="valid"), r3)),
                  {"x": x, "w": w, "b": b}))

    xu, wu, bu = _t(rng, (2, 3, 3, 2, 3)), _t(rng, (3, 2, 2, 2, 2)), _t(rng, (2,))
    ru = Tensor(rng.standard_normal((2, 2, 6, 4, 6)))
    items.append(("transposed_conv3d", lambda: ad.sum(ad.mul(ad.transposed_conv3d(xu, wu, bu, 2), ru)),
                  {"x": xu, "w": wu, "b": bu}))

    xr = _t(rng, (2, 4, 6, 6, 6), away_from_zero=True)
    rr = Tensor(rng.standard_normal(xr.shape))
    items.append(("relu", lambda: ad.sum(ad.mul(ad.relu(xr), rr)), {"x": xr}))

    xb, gb, bb = _t(rng, (2, 4, 5, 4, 3)), _t(rng, (4,)), _t(rng, (4,))
    rb = Tensor(rng.standard_normal(xb.shape))

    def bn_train():
        st = NormState(Tensor(np.zeros(4)), Tensor(np.ones(4)))
        return ad.sum(ad.mul(ad.batch_norm(xb, gb, bb, st, training=True), rb))

    def bn_infer():
        st = NormState(Tensor(np.full(4, 0.3)), Tensor(np.full(4, 2.0)))
        return ad.sum(ad.mul(ad.batch_norm(xb, gb, bb, st, training=False), rb))

    items.append(("batch_norm_train", bn_train, {"x": xb, "gamma": gb, "beta": bb}))
    items.append(("batch_norm_infer", bn_infer, {"x": xb, "gamma": gb, "beta": bb}))

    xs = _t(rng, (2, 3, 4, 4, 4))
    rs = Tensor(rng.standard_normal(xs.shape))
    items.append(("softmax_channels", lambda: ad.sum(ad.mul(ad.softmax_channels(xs), rs)), {"x": xs}))

    ca, cb = _t(rng, (2, 2, 3, 3, 3)), _t(rng, (2, 3, 3, 3, 3))
    rc = Tensor(rng.standard_normal((2, 5, 3, 3, 3)))
    items.append(("concat_channels", lambda: ad.sum(ad.mul(ad.concat_channels(ca, cb), rc)),
                  {"a": ca, "b": cb}))

    ea, eb = _t(rng, (2, 3, 4, 4, 4)), _t(rng, (2, 3, 4, 4, 4))
    re_ = Tensor(rng.standard_normal(ea.shape))
    items.append(("add", lambda: ad.sum(ad.mul(ad.add(ea, eb), re_)), {"a": ea, "b": eb}))
    items.append(("mul", lambda: ad.sum(ad.mul(ad.mul(ea, eb), re_)), {"a": ea, "b": eb}))
    # a tensor used in two branches accumulates both gradients
    items.append(("fan_out", lambda: ad.sum(ad.mul(ad.add(ad.mul(ea, ea), ad.relu(ea)), re_)), {"a": ea}))

    rsum = Tensor(rng.standard_normal((2, 4, 4, 4)))
    rmean = Tensor(rng.standard_normal((2, 4, 4)))
    items.append(("reduce_sum", lambda: ad.sum(ad.mul(ad.reduce(ea, "sum", 1), rsum)), {"x": ea}))
    items.append(("reduce_mean", lambda: ad.sum(ad.mul(ad.reduce(ea, "mean", (1, 3)), rmean)), {"x": ea}))

    ucfg_params = {}
    for name in ("conv1", "conv2"):
        ucfg_params[f"u/{name}/w"] = Tensor(rng.standard_normal((4, 4, 3, 3, 3)) * 0.3, requires_grad=True)
        ucfg_params[f"u/{name}/b"] = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    xu2 = _t(rng, (2, 4, 6, 6, 6))
    ru2 = Tensor(rng.standard_normal(xu2.shape))
    items.append(("residual_unit",
                  lambda: ad.sum(ad.mul(models.residual_unit(xu2, ucfg_params, "u", 4, 4, 1, "none"), ru2)),
                  dict(ucfg_params, x=xu2)))

    for arch in ("unet", "fcn"):
        cfg, params, xm = _micro_model(arch, rng)
        rm = Tensor(rng.standard_normal((1, 3, 8, 8, 8)))
        items.append((f"{arch}_micro",
                      lambda cfg=cfg, params=params, xm=xm, rm=rm: ad.sum(ad.mul(models.forward(xm, params, cfg), rm)),
                      dict(params)))

    zl = _t(rng, (2, 3, 4, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4, 4))
    for kind in ("ce", "balanced_ce", "dice"):
        lc = losses.LossConfig(kind=kind)
        items.append((f"loss_{kind}", lambda lc=lc: losses.compute_loss(zl, labels, lc), {"logits": zl}))
    return items


def run_suite(seed: int = 0, tol: float = TOLERANCE, h: float = STEP) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, f, params in _items(rng):
        try:
            # ReLU hinges straddled by a +-h probe are excluded
            report = grad_check(f, params, h=h, tol=tol, skip_kinks=True)
            err = max(item.max_rel_error for item in report.values())
            skipped = sum(item.skipped for item in report.values())
        except ad.NonFiniteError:
            err, skipped = float("inf"), 0
        results.append(SuiteResult(name, err, err < tol, skipped))
    return results


def format_report(results: list[SuiteResult]) -> str:
    lines = [
        f"{r.name:<20s} max_rel_error={r.max_rel_error:.3e} kinks_skipped={r.skipped:<3d} {'PASS' if r.passed else 'FAIL'}"
        for r in results
    ]
    return "\n".join(lines)
