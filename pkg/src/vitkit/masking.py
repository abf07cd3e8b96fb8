"""Patch masking and a pixel-regression masked-image-modeling pretext task.

Masking is applied to stem outputs: masked token rows are replaced by a
learned mask token. For a patch-independent stem (linear, hmlp) this is
equivalent, on the unmasked rows, to zeroing the masked patches' pixels
before the stem; ``commutation_check`` measures exactly that.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .model import Model, forward_features
from .rng import Rng
from .stems import Stem, patchify
from .tensor import Tensor


@dataclass(frozen=True)
class PatchMask:
    bits: np.ndarray
    ratio: float

    @property
    def num_masked(self) -> int:
        return int(self.bits.sum())

    def __len__(self):
        return len(self.bits)


@dataclass
class MIMHead:
    """Learned mask token plus the linear decoder from token features to patch pixels."""
    mask_token: Tensor
    weight: Tensor
    bias: Tensor

    def named_parameters(self):
        return [("mask_token", self.mask_token), ("mim.decoder.weight", self.weight),
                ("mim.decoder.bias", self.bias)]


def init_mim_head(width: int, rng: Rng, patch_size: int = 16, in_channels: int = 3, dtype="f32") -> MIMHead:
    dt = T.resolve_dtype(dtype)
    out = in_channels * patch_size * patch_size
    return MIMHead(Tensor(rng.trunc_normal((width,), dtype=dt), requires_grad=True),
                   Tensor(rng.trunc_normal((width, out), dtype=dt), requires_grad=True),
                   Tensor(np.zeros(out, dt), requires_grad=True))


def sample_mask(rng: Rng, num_patches: int, ratio: float = 0.4) -> PatchMask:
    """Uniformly random subset of exactly round(ratio * T) patches."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = int(round(ratio * num_patches))
    bits = np.zeros(num_patches, dtype=bool)
    if k:
        bits[rng.choice(num_patches, k)] = True
    return PatchMask(bits, ratio)


def _bits(mask) -> np.ndarray:
    return np.asarray(mask.bits if isinstance(mask, PatchMask) else mask, dtype=bool)


def apply_mask_tokens(tokens, mask, mask_token) -> Tensor:
    tokens = T.as_tensor(tokens)
    bits = _bits(mask)
    if tokens.ndim != 3 or bits.shape != (tokens.shape[1],):
        raise DimensionError(f"mask of length {bits.shape[0]} does not match tokens {tokens.shape}")
    mt = T.as_tensor(mask_token, tokens.dtype)
    return T.where(bits[None, :, None], T.reshape(mt, (1, 1, -1)), tokens)


def apply_mask_pixels(images, mask, patch_size: int = 16):
    """Zero the pixels of masked patches. Returns the same kind (Tensor or ndarray) it was given."""
    bits = _bits(mask)
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    b, c, h, w = arr.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    gh, gw = h // patch_size, w // patch_size
    if bits.shape != (gh * gw,):
        raise DimensionError(f"mask of length {bits.shape[0]} does not match {gh * gw} patches")
    pix = np.repeat(np.repeat(bits.reshape(gh, gw), patch_size, 0), patch_size, 1)
    zero = np.zeros((), arr.dtype)
    if isinstance(images, Tensor):
        return T.where(~pix[None, None], images, zero)
    return np.where(pix[None, None], zero, arr)


def commutation_check(stem: Stem, image, mask, mask_token, mode: str = "eval") -> float:
    """Max |difference| on unmasked rows between mask-after-stem and mask-before-stem."""
    if mode == "train" and stem.spec.norm == "bn":
        raise ConfigError("commutation is only defined for ln stems or bn in eval mode")
    bits = _bits(mask)
    with T.no_grad():
        after = apply_mask_tokens(stem(T.as_tensor(image), mode), bits, mask_token).data
        before = apply_mask_tokens(stem(apply_mask_pixels(T.as_tensor(image), bits, stem.spec.patch_size), mode),
                                   bits, mask_token).data
    keep = ~bits
    if not keep.any():
        return 0.0
    return float(np.abs(after[:, keep] - before[:, keep]).max())


def patch_targets(images, patch_size: int = 16, eps: float = 1e-6) -> np.ndarray:
    """Per-patch normalized pixels, shape (b, T, c*p*p)."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    p = patchify(Tensor(arr), patch_size).data
    mu = p.mean(axis=-1, keepdims=True)
    var = p.var(axis=-1, keepdims=True)
    return (p - mu) / np.sqrt(var + eps)


def mim_loss(model: Model, images, mask, head: MIMHead, mode: str = "train", rng: Rng | None = None,
             targets=None) -> Tensor:
    """Mean squared error between decoded masked tokens and their normalized pixels.

    ``targets`` overrides the regression targets (b, T, c*p*p); by default they
    come from ``images`` via ``patch_targets``.
    """
    bits = _bits(mask)
    if not bits.any():
        raise ConfigError("mim_loss needs at least one masked patch")
    cfg = model.config
    feats = forward_features(model, images, mode, rng, mask_bits=bits, mask_token=head.mask_token)
    idx = np.flatnonzero(bits) + 1  # row 0 is the class token
    pred = T.linear(feats[:, idx, :], head.weight, head.bias)
    if targets is None:
        targets = patch_targets(images, cfg.patch_size)
    tgt = np.asarray(targets)[:, bits].astype(pred.dtype)
    return T.mse(pred, tgt)
