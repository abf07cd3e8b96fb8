"""Patch pre-processing front-ends.

Three stems map a (b, c, H, W) image batch to (b, T, d) tokens, T = (H/16)(W/16):

* ``linear``: flatten each 16x16 patch and project it (optional norm/GELU).
* ``hmlp``: conv k4/s4 -> norm -> GELU -> conv k2/s2 -> norm -> GELU ->
  conv k2/s2 -> norm. Kernel size equals stride at every stage, so each
  output token sees exactly one 16x16 patch.
* ``conv``: four overlapping 3x3/stride-2 convolutions (c -> d/8 -> d/4 -> d/2
  -> d). Receptive fields straddle patch borders.

BatchNorm in training mode couples patches through batch statistics, so the
independence and masking-commutation checks run in ``ln`` mode or with BN in
eval mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class StemSpec:
    kind: str = "linear"
    norm: str = "none"
    nonlinearity: str = "none"
    d: int = 768
    patch_size: int = 16
    in_channels: int = 3

    def validate(self) -> "StemSpec":
        if self.kind not in ("linear", "conv", "hmlp"):
            raise ConfigError(f"unknown stem kind {self.kind!r}")
        if self.norm not in ("bn", "ln", "none"):
            raise ConfigError(f"unknown stem norm {self.norm!r}")
        if self.nonlinearity not in ("gelu", "none"):
            raise ConfigError(f"unknown stem nonlinearity {self.nonlinearity!r}")
        if self.kind == "hmlp" and (self.d % 4 or self.patch_size != 16):
            raise ConfigError(f"hmlp stem needs d divisible by 4 and 16x16 patches (d={self.d}, patch={self.patch_size})")
        if self.kind == "conv" and (self.d % 8 or self.patch_size != 16):
            raise ConfigError(f"conv stem needs d divisible by 8 and 16x16 patches (d={self.d}, patch={self.patch_size})")
        return self

    @classmethod
    def from_config(cls, cfg) -> "StemSpec":
        return cls(cfg.stem_kind, cfg.resolved_stem_norm, cfg.resolved_stem_act, cfg.width,
                   cfg.patch_size, cfg.in_channels)

    def conv_layers(self) -> list[tuple[str, int, int, int, int, int]]:
        """(name, cin, cout, kernel, stride, padding) for the conv-based stems."""
        c, d = self.in_channels, self.d
        if self.kind == "hmlp":
            q = d // 4
            return [("conv1", c, q, 4, 4, 0), ("conv2", q, q, 2, 2, 0), ("conv3", q, d, 2, 2, 0)]
        if self.kind == "conv":
            chans = [c, d // 8, d // 4, d // 2, d]
            return [(f"conv{i + 1}", chans[i], chans[i + 1], 3, 2, 1) for i in range(4)]
        p = self.patch_size
        return [("proj", c, d, p, p, 0)]


class Stem:
    def __init__(self, spec: StemSpec, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.buffers = buffers

    def named_parameters(self, prefix="stem"):
        return [(f"{prefix}.{k}", v) for k, v in self.params.items()]

    def named_buffers(self, prefix="stem"):
        return [(f"{prefix}.{k}", v) for k, v in self.buffers.items()]

    def __call__(self, images, mode="eval") -> Tensor:
        fn = {"linear": linear_stem, "hmlp": hmlp_stem, "conv": conv_stem}[self.spec.kind]
        return fn(images, self.params, self.spec, self.buffers, mode)


def init_stem(spec: StemSpec, rng: Rng, dtype="f32") -> Stem:
    spec.validate()
    dt = T.resolve_dtype(dtype)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def add_norm(name, c):
        if spec.norm == "none":
            return
        params[f"{name}.weight"] = Tensor(np.ones(c, dt), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(c, dt), requires_grad=True)
        if spec.norm == "bn":
            buffers[f"{name}.running_mean"] = np.zeros(c, dt)
            buffers[f"{name}.running_var"] = np.ones(c, dt)

    if spec.kind == "linear":
        p, c, d = spec.patch_size, spec.in_channels, spec.d
        params["proj.weight"] = Tensor(rng.trunc_normal((c * p * p, d), dtype=dt), requires_grad=True)
        params["proj.bias"] = Tensor(np.zeros(d, dt), requires_grad=True)
        add_norm("norm", d)
    else:
        for i, (name, cin, cout, k, _, _) in enumerate(spec.conv_layers(), start=1):
            params[f"{name}.weight"] = Tensor(rng.trunc_normal((cout, cin, k, k), dtype=dt), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(cout, dt), requires_grad=True)
            add_norm(f"norm{i}", cout)
    return Stem(spec, params, buffers)


def _check_images(images: Tensor, spec: StemSpec) -> tuple[int, int]:
    if images.ndim != 4 or images.shape[1] != spec.in_channels:
        raise DimensionError(f"images must be (b, {spec.in_channels}, H, W), got {images.shape}")
    h, w = images.shape[2:]
    p = spec.patch_size
    if h % p or w % p:
        raise DimensionError(f"image size {h}x{w} is not divisible by patch size {p}")
    return h // p, w // p


def _norm(x: Tensor, name: str, params, buffers, kind: str, mode: str) -> Tensor:
    """Normalize a (b, c, h, w) map: per-channel BN or per-position LN."""
    if kind == "none":
        return x
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    if kind == "bn":
        return T.batch_norm_2d(x, w, b, buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"],
                               training=(mode == "train"))
    y = T.layer_norm(T.transpose(x, (0, 2, 3, 1)), w, b)
    return T.transpose(y, (0, 3, 1, 2))


def _to_tokens(fmap: Tensor) -> Tensor:
    b, d, gh, gw = fmap.shape
    return T.transpose(T.reshape(fmap, (b, d, gh * gw)), (0, 2, 1))


def patchify(images: Tensor, patch: int) -> Tensor:
    """(b, c, H, W) -> (b, T, c*patch*patch), each row one patch in (c, y, x) order."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = T.reshape(images, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch * patch))


def linear_stem(images, params, spec: StemSpec, buffers=None, mode="eval") -> Tensor:
    images = T.as_tensor(images)
    gh, gw = _check_images(images, spec)
    tok = T.linear(patchify(images, spec.patch_size), params["proj.weight"], params["proj.bias"])
    if spec.norm != "none":
        b, n, d = tok.shape
        fmap = T.transpose(T.reshape(tok, (b, gh, gw, d)), (0, 3, 1, 2))
        tok = _to_tokens(_norm(fmap, "norm", params, buffers, spec.norm, mode))
    if spec.nonlinearity == "gelu":
        tok = T.gelu(tok)
    return tok


def _conv_stack(images, params, spec: StemSpec, buffers, mode) -> Tensor:
    images = T.as_tensor(images)
    _check_images(images, spec)
    layers = spec.conv_layers()
    x = images
    for i, (name, _, _, k, s, pad) in enumerate(layers, start=1):
        x = T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=s, padding=pad)
        x = _norm(x, f"norm{i}", params, buffers, spec.norm, mode)
        if i < len(layers) and spec.nonlinearity == "gelu":
            x = T.gelu(x)
    return _to_tokens(x)


def hmlp_stem(images, params, spec: StemSpec, buffers=None, mode="eval") -> Tensor:
    if spec.kind != "hmlp":
        spec = StemSpec("hmlp", spec.norm, spec.nonlinearity, spec.d, spec.patch_size, spec.in_channels)
    spec.validate()
    return _conv_stack(images, params, spec, buffers, mode)


def conv_stem(images, params, spec: StemSpec, buffers=None, mode="eval") -> Tensor:
    if spec.kind != "conv":
        spec = StemSpec("conv", spec.norm, spec.nonlinearity, spec.d, spec.patch_size, spec.in_channels)
    spec.validate()
    return _conv_stack(images, params, spec, buffers, mode)


def patch_independence_check(stem: Stem, rng: Rng, trials: int = 100, image_size: int = 64,
                             mode: str = "eval") -> dict:
    """Perturb one random patch per trial and measure how much every other token moves.

    Returns ``{"independent", "max_leakage", "trials", "failing_trials"}``;
    independence means the leakage is exactly zero in every trial.
    """
    if mode == "train" and stem.spec.norm == "bn":
        raise ConfigError("patch independence is only defined for ln stems or bn in eval mode")
    p, c = stem.spec.patch_size, stem.spec.in_channels
    g = image_size // p
    dt = next(iter(stem.params.values())).dtype
    worst, failing = 0.0, 0
    with T.no_grad():
        for _ in range(trials):
            img = rng.normal((1, c, image_size, image_size), dtype=dt)
            k = int(rng.integers(0, g * g))
            py, px = divmod(k, g)
            pert = img.copy()
            pert[:, :, py * p:(py + 1) * p, px * p:(px + 1) * p] += rng.normal((1, c, p, p), dtype=dt)
            a = stem(Tensor(img), mode).data[0]
            b = stem(Tensor(pert), mode).data[0]
            others = np.ones(g * g, dtype=bool)
            others[k] = False
            leak = float(np.abs(a[others] - b[others]).max()) if others.any() else 0.0
            worst = max(worst, leak)
            failing += leak > 0
    return {"independent": worst == 0.0, "max_leakage": worst, "trials": trials,
            "failing_trials": int(failing)}
