"""Parameter scopes for fine-tuning (full / attn / ffn) and freeze verification.

Block tensors split cleanly into two groups: ``attn`` (norm1, qkv, proj,
gamma1) and ``ffn`` (norm2, fc1, fc2, gamma2). The head, final norm,
positional embedding, class token and mask token stay trainable in every
scope. Stem tensors are trainable only under ``full``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .model import Model, interpolate_pos_embed
from .optim import OptimizerConfig
from .rng import Rng

SCOPES = ("full", "attn", "ffn")
ALWAYS_TRAINABLE = ("head.", "norm.", "pos_embed", "cls_token", "mask_token")
_ATTN_LOCAL = ("norm1.", "attn.", "gamma1")
_FFN_LOCAL = ("norm2.", "mlp.", "gamma2")


@dataclass(frozen=True)
class TuneScope:
    scope: str = "full"
    always_trainable: tuple = ALWAYS_TRAINABLE

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ConfigError(f"unknown tune scope {self.scope!r}; expected one of {SCOPES}")

    def selects(self, name: str) -> bool:
        if self.scope == "full" or name.startswith(self.always_trainable):
            return True
        return param_group(name) == self.scope


def param_group(name: str) -> str:
    """One of 'attn', 'ffn', 'stem', 'always' for a canonical parameter name."""
    if name.startswith("layers."):
        local = name.split(".", 3)[3]
        if local.startswith(_ATTN_LOCAL):
            return "attn"
        if local.startswith(_FFN_LOCAL):
            return "ffn"
        raise ConfigError(f"unclassified block tensor {name!r}")
    if name.startswith("stem."):
        return "stem"
    if name.startswith(ALWAYS_TRAINABLE) or name.startswith("mim."):
        return "always"
    raise ConfigError(f"unclassified tensor {name!r}")


@dataclass
class ParamGroupReport:
    scope: str
    total_params: int
    trainable_params: int
    frozen_params: int
    trainable_fraction: float
    groups: dict
    block_params: int
    block_trainable: int

    @property
    def block_fraction(self) -> float:
        return self.block_trainable / self.block_params if self.block_params else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_fraction"] = self.block_fraction
        return d


def _as_scope(scope) -> TuneScope:
    return scope if isinstance(scope, TuneScope) else TuneScope(scope)


def select_trainable(model: Model, scope) -> ParamGroupReport:
    """Set ``requires_grad`` on every parameter according to ``scope``."""
    scope = _as_scope(scope)
    groups: dict[str, dict] = {}
    total = trainable = 0
    for name, t in model.named_parameters():
        on = scope.selects(name)
        t.requires_grad = on
        if not on:
            t.grad = None
        g = groups.setdefault(param_group(name), {"total": 0, "trainable": 0})
        g["total"] += t.size
        g["trainable"] += t.size if on else 0
        total += t.size
        trainable += t.size if on else 0
    blk = {k: groups.get(k, {"total": 0, "trainable": 0}) for k in ("attn", "ffn")}
    return ParamGroupReport(scope.scope, total, trainable, total - trainable, trainable / total, groups,
                            blk["attn"]["total"] + blk["ffn"]["total"],
                            blk["attn"]["trainable"] + blk["ffn"]["trainable"])


def freeze_verify(before, after: Model, scope) -> bool:
    """True iff every parameter that ``scope`` does not train is bitwise identical.

    ``before`` is a model snapshot (e.g. ``model.clone()``) or a state dict.
    """
    scope = _as_scope(scope)
    if isinstance(before, Model):
        if before.config.replace(image_size=after.config.image_size) != after.config:
            raise ConfigError("freeze_verify: models have different configs")
        ref = {n: t.data for n, t in before.named_parameters()}
    else:
        ref = before
    cur = dict(after.named_parameters())
    if set(cur) - set(ref):
        raise ConfigError(f"freeze_verify: snapshot lacks {sorted(set(cur) - set(ref))[:3]}")
    for name, t in cur.items():
        if scope.selects(name):
            continue
        old = ref[name]
        if old.shape != t.shape or old.dtype != t.dtype or old.tobytes() != t.data.tobytes():
            return False
    return True


def finetune_resolution(model: Model, new_size: int, scope, opt_cfg: OptimizerConfig, data: Dataset,
                        epochs: int = 1, seed: int = 0, test: Dataset | None = None):
    """Resample positions to ``new_size``, restrict training to ``scope``, and train.

    Returns ``(model, report, metrics)``; the input model is left untouched.
    """
    from .training import fit

    tuned = interpolate_pos_embed(model, new_size)
    report = select_trainable(tuned, scope)
    rows = fit(tuned, data, epochs, opt_cfg, Rng(seed).fork("finetune"), test=test)
    return tuned, report, rows


def trainable_names(model: Model, scope) -> list[str]:
    scope = _as_scope(scope)
    return [n for n, _ in model.named_parameters() if scope.selects(n)]


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in model.named_parameters()}
