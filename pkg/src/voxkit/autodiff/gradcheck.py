"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Record, Tensor


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckItem:
    name: str
    max_rel_error: float
    passed: bool
    checked: int
    skipped: int = 0


def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data, dtype=np.float64).reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("function value is not finite")
    return v


def _hinge_signature(rec: Record) -> np.ndarray:
    masks = [n.inputs[0].data.reshape(-1) > 0 for n in rec.nodes if n is not None and n.op == "relu"]
    return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    tol: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    analytic_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
    skip_kinks: bool = False,
) -> dict[str, GradCheckItem]:
    """Compare analytic gradients of ``f`` with (f(p+h) - f(p-h)) / 2h.

    ``f`` takes no arguments and reads ``params`` by closure. Entries of a
    parameter are perturbed in place and restored. With ``max_entries`` only
    a random subset of each parameter's entries is probed.

    ``skip_kinks`` drops entries whose +-h probe flips the sign of any ReLU
    input, i.e. straddles a hinge where the function is not differentiable
    and central differences are meaningless.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Record() as rec:
        loss = f()
    _scalar(loss)
    base_signature = _hinge_signature(rec) if skip_kinks else None
    rec.backward(loss)

    def evaluate():
        if not skip_kinks:
            return _scalar(f()), True
        with Record() as r:
            v = _scalar(f())
        return v, np.array_equal(_hinge_signature(r), base_signature)

    report = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        if analytic_hook is not None:
            analytic = analytic_hook(name, analytic)
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"analytic gradient of {name} is not finite")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        keep = np.ones(idx.size, dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp, same_p = evaluate()
            flat[i] = orig - h
            fm, same_m = evaluate()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
            keep[j] = same_p and same_m
        err = relative_error(analytic.reshape(-1)[idx][keep], numeric[keep])
        report[name] = GradCheckItem(name, err, err < tol, int(keep.sum()), int((~keep).sum()))
    return report
