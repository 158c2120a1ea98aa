from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .layers import ParamSet


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def analytic_gradients(loss_fn, params: ParamSet) -> dict[str, np.ndarray]:
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    grads = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    params.zero_grad()
    return grads


def numeric_gradients(loss_fn, params: ParamSet, step: float = 1e-5, names=None) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time."""
    out = {}
    for name, p in params.items():
        if names is not None and name not in names:
            continue
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = float(loss_fn().data)
            flat[k] = orig - step
            lo = float(loss_fn().data)
            flat[k] = orig
            gflat[k] = (hi - lo) / (2.0 * step)
        out[name] = g
    return out


def check_gradients(loss_fn, params: ParamSet, step: float = 1e-5, names=None) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be a deterministic zero-argument callable returning a
    scalar Tensor. The relative error is norm-wise per parameter tensor.
    """
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, step=step, names=names)
    return [
        GradCheckResult(name, relative_error(analytic[name], numeric[name]), analytic[name], numeric[name])
        for name in numeric
    ]
