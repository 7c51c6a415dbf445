from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class Adam:
    """Adaptive moment estimation over a named parameter table."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor]) -> float:
        """Apply one update, clear gradients and return the pre-clip grad norm."""
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        sq = sum(float(np.vdot(p.grad, p.grad)) for p in params.values())
        norm = float(np.sqrt(sq))
        coef = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            coef = self.grad_clip / (norm + 1e-12)

        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad * coef if coef != 1.0 else p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            elif m.shape != p.shape:
                raise ValueError(f"moment shape {m.shape} != parameter {name!r} shape {p.shape}")
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype, copy=False)
            p.grad = None
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            (self.m if kind == "m" else self.v)[name] = np.array(arr, dtype=np.float32)
        self.step_count = step_count
