"""SGD and AdamW over Tensors; frozen tensors (requires_grad=False) are never touched."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def _check_lr(lr):
    if not lr >= 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")


def _live(params):
    return [(i, p) for i, p in enumerate(params) if p.requires_grad and p.grad is not None]


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, state=None) -> dict:
    """One in-place momentum-SGD update (L2 weight decay folded into the gradient)."""
    _check_lr(lr)
    state = {} if state is None else state
    for i, p in _live(params):
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            buf = state.get(i)
            if buf is None:
                buf = state[i] = g.copy()
            else:
                buf *= momentum
                buf += g
            g = buf
        p.data -= (lr * g).astype(p.dtype, copy=False)
    return state


def adamw_step(params, lr, state=None, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> dict:
    """One in-place AdamW update with bias-corrected moments and decoupled decay."""
    _check_lr(lr)
    b1, b2 = betas
    state = {"t": 0} if state is None else state
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, p in _live(params):
        g = p.grad
        m, v = state.get(("m", i)), state.get(("v", i))
        if m is None:
            m = state[("m", i)] = np.zeros_like(p.data)
            v = state[("v", i)] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    warmup_steps: int = 0
    batch_size: int = 64
    grad_clip: float | None = None

    def validate(self) -> "OptimizerConfig":
        if self.name not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.name!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        _check_lr(self.lr)
        return self


class Optimizer:
    def __init__(self, params, cfg: OptimizerConfig, total_steps: int = 1):
        self.params = list(params)
        self.cfg = cfg.validate()
        self.total_steps = max(int(total_steps), 1)
        self.step_count = 0
        self.state: dict | None = None

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        if cfg.schedule == "constant":
            return cfg.lr
        span = max(self.total_steps - cfg.warmup_steps, 1)
        frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for _, p in _live(self.params)))

    def step(self) -> float:
        lr = self.lr_at(self.step_count)
        cfg = self.cfg
        if cfg.grad_clip:
            norm = self.grad_norm()
            if norm > cfg.grad_clip:
                for _, p in _live(self.params):
                    p.grad *= cfg.grad_clip / norm
        if cfg.name == "sgd":
            self.state = sgd_step(self.params, lr, cfg.momentum, cfg.weight_decay, self.state)
        else:
            self.state = adamw_step(self.params, lr, self.state, cfg.betas, cfg.eps, cfg.weight_decay)
        self.step_count += 1
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(params: list[Tensor], cfg: OptimizerConfig, total_steps: int) -> Optimizer:
    return Optimizer(params, cfg, total_steps)
