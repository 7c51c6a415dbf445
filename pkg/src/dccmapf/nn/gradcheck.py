"""Central finite-difference gradient checker (runs in float64)."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error; 0 when both vectors are numerically zero."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(diff / scale)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare tape gradients against central differences, per parameter.

    ``loss_fn`` must rebuild the loss from ``params`` on every call. The
    parameters are promoted to float64 for the duration of the check and
    restored afterwards. With ``max_entries`` only that many randomly chosen
    entries of each parameter are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    dtypes = {name: p.data.dtype for name, p in params.items()}
    for p in params.values():
        p.data = p.data.astype(np.float64)
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    try:
        with Tape() as tape:
            loss = loss_fn()
        backward(tape, loss)
        errors = {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                hi = loss_fn().item()
                flat[i] = orig - step
                lo = loss_fn().item()
                flat[i] = orig
                numeric[k] = (hi - lo) / (2.0 * step)
            errors[name] = relative_error(p.grad.reshape(-1)[idx], numeric)
        return errors
    finally:
        for name, p in params.items():
            p.data = p.data.astype(dtypes[name])
            p.grad = np.zeros_like(p.data)
