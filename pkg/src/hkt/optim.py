"""SGD with classical momentum."""

from __future__ import annotations

import numpy as np

from .errors import UsageError, ValidationError


def sgd_step(params, lr: float, momentum: float = 0.0, velocity: dict | None = None) -> dict:
    """Apply ``v <- momentum * v + grad; p <- p - lr * v`` in place and clear grads.

    ``velocity`` maps ``id(param)`` to its buffer and is returned for reuse.
    """
    if lr < 0:
        raise ValidationError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValidationError(f"momentum must lie in [0, 1), got {momentum}")
    velocity = {} if velocity is None else velocity
    missing = [p for p in params if p.grad is None]
    if missing:
        names = ", ".join(str(p.name) for p in missing[:5])
        raise UsageError(f"{len(missing)} parameter(s) have no gradient: {names}")
    for p in params:
        key = id(p)
        v = velocity.get(key)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[key] = v
        p.data -= lr * v
        p.grad = None
    return velocity


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def holds(self, tensor) -> bool:
        return any(p is tensor for p in self.params)
