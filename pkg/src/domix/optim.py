"""AdamW with decoupled weight decay, plus the two learning-rate schedules."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    """Standard bias-corrected Adam with decoupled weight decay.

    Only parameters handed to the constructor are ever touched; frozen
    tensors simply stay out of the list.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ContractError(f"AdamW: learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(base_lr: float, step: int, total_steps: int, schedule: str = "linear", warmup_steps: int = 100) -> float:
    """Learning rate for 0-indexed ``step``.

    'linear': ramp from base/warmup to base over the warmup, then decay
    linearly to 0 at ``total_steps``. 'constant': always base.
    """
    if schedule == "constant":
        return base_lr
    if schedule != "linear":
        raise ContractError(f"unknown lr schedule {schedule!r}")
    warmup = min(warmup_steps, total_steps)
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warmup))
