"""Central finite differences and gradient comparison helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Parameter, Tape, Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(np.asarray(value).reshape(()))


def finite_diff_grad(f: Callable, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives an array of ``x``'s shape (perturbed copies) and must be
    deterministic; non-determinism is not detected.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _scalar(f(base.copy()))
        flat[i] = orig - h
        down = _scalar(f(base.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(analytic, numeric, floor: float = 1e-2, atol: float = 1e-6) -> float:
    """Largest per-element relative error.

    Each element is compared relative to its own magnitude, floored at
    ``floor`` times the largest magnitude in ``numeric`` and at ``atol`` so
    that entries that are (near) zero do not blow the ratio up. A gradient
    that is identically zero thus passes when both sides are round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not n.size:
        return 0.0
    scale = float(np.max(np.abs(n)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, atol))
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def check_parameter_grads(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Parameter]],
    h: float = 1e-3,
    max_elems: int = 24,
    seed: int = 0,
) -> list[GradReport]:
    """Compare tape gradients of ``loss_fn()`` with finite differences.

    At most ``max_elems`` randomly chosen entries of each parameter are
    perturbed, which keeps whole-model checks affordable.
    """
    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    reports = []
    for name, p in params:
        analytic = p.grad.reshape(-1).astype(np.float64)
        n = p.size
        idx = np.arange(n) if n <= max_elems else np.sort(rng.choice(n, max_elems, replace=False))
        numeric = np.empty(len(idx))
        flat = p.data.reshape(-1)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(loss_fn())
            flat[i] = orig - h
            down = _scalar(loss_fn())
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * h)
        reports.append(GradReport(name, rel_error(analytic[idx], numeric), len(idx)))
    return reports
