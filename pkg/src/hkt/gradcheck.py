"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ValidationError
from .tensor import Tape, Tensor, backward, no_grad


def _scalar(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericError(f"objective returned non-finite value {v!r}")
    return v


def analytic_grads(f, params):
    """Run ``f`` once under a fresh tape and return copies of each param's gradient."""
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape():
        out = f()
        _scalar(out)
        if isinstance(out, Tensor) and out.requires_grad:
            backward(out)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g
    return grads


def numeric_grads(f, params, epsilon: float = 1e-5):
    """Central differences ``(f(p + eps) - f(p - eps)) / (2 eps)`` for every element."""
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    grads = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                plus = _scalar(f())
                flat[i] = orig - epsilon
                minus = _scalar(f())
                flat[i] = orig
                g.reshape(-1)[i] = (plus - minus) / (2.0 * epsilon)
            grads.append(g)
    return grads


def grad_check(f, params, epsilon: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` over all parameters.

    ``f`` takes no arguments and returns a scalar tensor built from ``params``.
    """
    params = list(params)
    analytic = analytic_grads(f, params)
    numeric = numeric_grads(f, params, epsilon)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst
