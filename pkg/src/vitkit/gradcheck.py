"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .errors import EvaluationError
from .rng import Rng
from .tensor import Tensor


def _eval(f) -> float:
    out = f()
    val = float(out.data) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise EvaluationError(f"grad_check: loss is not finite ({val})")
    return val


def grad_check(f, params, rng: Rng | None = None, max_coords: int | None = 16,
               step: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. For each parameter up to ``max_coords`` coordinates are probed
    (all of them when ``max_coords`` is None) with step ``step * max(1, |x|)``.
    The error at a coordinate is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``.
    The floor keeps coordinates whose true gradient is exactly zero (a key bias
    under softmax, say) from dividing rounding noise by rounding noise; it
    scales with the loss because the rounding noise of ``f(x+h) - f(x-h)`` does.
    """
    rng = rng or Rng(0)
    params = list(params)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    loss = f()
    if not np.isfinite(float(loss.data)):
        raise EvaluationError(f"grad_check: loss is not finite ({float(loss.data)})")
    tiny = floor * max(1.0, abs(float(loss.data)))
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else np.sort(rng.choice(n, max_coords))
        for i in idx:
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = _eval(f)
            flat[i] = orig - h
            fm = _eval(f)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), tiny)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
