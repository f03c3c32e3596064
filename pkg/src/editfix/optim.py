"""AdamW with decoupled weight decay and the triangular learning-rate schedule."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import NumericError, Parameter


def triangular_lr(step: int, total_steps: int, peak_lr: float = 1e-4, warmup_frac: float = 0.1) -> float:
    """Linear ramp 0 -> peak over the warmup fraction, then linear decay to 0.

    ``step`` is 1-based; the peak is reached exactly at the end of warmup.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    step = min(max(step, 1), total_steps)
    warmup = max(1, round(total_steps * warmup_frac))
    if step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def adamw_step(param, grad, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update on flat arrays; ``t`` is the 1-based step."""
    b1, b2 = betas
    if not np.all(np.isfinite(grad)):
        raise NumericError("adamw_step: gradient contains NaN or infinity")
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    _kernels.adamw_update(param, grad, m, v, lr, b1, b2, eps, weight_decay, bc1, bc2)


class AdamW:
    """Decoupled-weight-decay Adam over a model's parameter registry.

    Moment tensors start at zero on the first step. ``lr`` may be overridden
    per step, which is how the triangular schedule plugs in.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        rate = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"NaN gradient in parameter {p.name!r} at step {self.t}")
            adamw_step(
                p.data.reshape(-1), p.grad.reshape(-1),
                self.m[p.name].reshape(-1), self.v[p.name].reshape(-1),
                self.t, rate, self.betas, self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Optimizer state as named arrays (for checkpoint resume)."""
        out = {"adamw/t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            out[f"adamw/m/{name}"] = self.m[name]
            out[f"adamw/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adamw/t"][0])
        for name in self.m:
            self.m[name][...] = arrays[f"adamw/m/{name}"]
            self.v[name][...] = arrays[f"adamw/v/{name}"]
