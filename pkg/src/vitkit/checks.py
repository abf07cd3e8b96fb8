"""Verification suites behind the ``gradcheck`` and ``masktest`` commands."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ViTConfig
from .gradcheck import grad_check
from .masking import commutation_check, init_mim_head, mim_loss, sample_mask
from .model import build_model, ffn_forward, forward_parallel, mhsa_forward
from .rng import Rng
from .stems import StemSpec, init_stem, patch_independence_check
from .tensor import Tensor

TI_TWO_BLOCK = ViTConfig(width=192, depth=2, heads=3, image_size=32, num_classes=10, dtype="f64")


def _leaf(rng: Rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(shape) * scale, requires_grad=True)


def _project(y: Tensor, rng: Rng) -> Tensor:
    """Contract with a fixed random tensor so every output coordinate matters."""
    return T.tsum(y * rng.normal(y.shape))


def _layer_cases(rng: Rng) -> dict:
    cases = {}

    a, b = _leaf(rng, (7, 5)), _leaf(rng, (5, 3))
    r = rng.fork("mm")
    cases["matmul"] = (lambda: _project(T.matmul(a, b), Rng(r.seed)), [a, b])

    x = _leaf(rng, (4, 5), 2.0)
    cases["gelu"] = (lambda: _project(T.gelu(x), Rng(r.seed + 1)), [x])

    x2, g2, b2 = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    cases["layer_norm"] = (lambda: _project(T.layer_norm(x2, g2, b2), Rng(r.seed + 2)), [x2, g2, b2])

    x3, g3, b3 = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (3,)), _leaf(rng, (3,))
    rm, rv = np.zeros(3), np.ones(3)
    cases["batch_norm_train"] = (
        lambda: _project(T.batch_norm_2d(x3, g3, b3, rm.copy(), rv.copy(), training=True), Rng(r.seed + 3)),
        [x3, g3, b3])
    erm, erv = rng.normal(3), rng.uniform(3, 0.5, 2.0)
    cases["batch_norm_eval"] = (
        lambda: _project(T.batch_norm_2d(x3, g3, b3, erm, erv, training=False), Rng(r.seed + 4)), [x3, g3, b3])

    x4 = _leaf(rng, (3, 5), 2.0)
    cases["softmax"] = (lambda: _project(T.softmax(x4), Rng(r.seed + 5)), [x4])

    x5, k5 = _leaf(rng, (1, 3, 8, 8)), _leaf(rng, (4, 3, 2, 2))
    cases["conv2d"] = (lambda: _project(T.conv2d(x5, k5, stride=2), Rng(r.seed + 6)), [x5, k5])
    k6, c6 = _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (2,))
    cases["conv2d_pad"] = (lambda: _project(T.conv2d(x5, k6, c6, stride=2, padding=1), Rng(r.seed + 7)),
                           [x5, k6, c6])

    x7 = _leaf(rng, (4, 6))
    y7 = rng.integers(0, 6, 4)
    cases["cross_entropy"] = (lambda: T.cross_entropy(x7, y7), [x7])

    cfg = ViTConfig(width=8, depth=1, heads=2, image_size=32, num_classes=4, dtype="f64", layerscale=0.5)
    blk = build_model(cfg, rng.fork("block")).blocks[0]
    for name, t in blk.params.items():
        t.data = t.data + rng.normal(t.shape, 0.3)
    xb = _leaf(rng, (2, 5, 8))
    cases["transformer_block"] = (
        lambda: _project(xb + mhsa_forward(blk, xb) + ffn_forward(blk, xb + mhsa_forward(blk, xb)), Rng(r.seed + 8)),
        [xb] + list(blk.params.values()))
    return cases


def _model_case(rng: Rng):
    model = build_model(TI_TWO_BLOCK, rng.fork("model"))
    images = rng.normal((2, 3, 32, 32))
    labels = rng.integers(0, 10, 2)
    return (lambda: T.cross_entropy(forward_parallel(model, images, "eval"), labels)), model.parameters()


def _mim_case(rng: Rng):
    model = build_model(TI_TWO_BLOCK, rng.fork("mim-model"))
    head = init_mim_head(model.config.width, rng.fork("mim-head"), dtype="f64")
    images = rng.normal((2, 3, 32, 32))
    mask = sample_mask(rng.fork("mask"), model.config.num_patches, 0.5)
    params = model.parameters() + [head.mask_token, head.weight, head.bias]
    return (lambda: mim_loss(model, images, mask, head, mode="eval")), params


def run_gradchecks(trials: int = 1, seed: int = 0, max_coords: int = 6) -> dict[str, float]:
    """Worst relative error per check over ``trials`` random draws (all f64)."""
    worst: dict[str, float] = {}
    for t in range(trials):
        rng = Rng(seed).fork(f"trial-{t}")
        cases = _layer_cases(rng)
        cases["vit_two_block"] = _model_case(rng)
        cases["mim_loss"] = _mim_case(rng)
        for name, (f, params) in cases.items():
            coords = None if name in ("matmul", "gelu", "layer_norm", "softmax", "cross_entropy") else max_coords
            err = grad_check(f, params, rng.fork(name), max_coords=coords)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def run_masktest(stem_kind: str = "hmlp", stem_norm: str = "ln", width: int = 32, trials: int = 100,
                 ratio: float = 0.4, image_size: int = 64, seed: int = 0) -> dict:
    """Patch-independence and masking-commutation report for one stem in eval mode."""
    act = "none" if stem_kind == "linear" else "gelu"
    spec = StemSpec(stem_kind, stem_norm, act, width, 16, 3)
    rng = Rng(seed)
    stem = init_stem(spec, rng.fork("stem"), "f64")
    for name, arr in stem.buffers.items():
        # non-trivial frozen statistics so bn-eval is not an identity
        arr[...] = rng.uniform(arr.shape, 0.5, 1.5) if name.endswith("var") else rng.normal(arr.shape, 0.1)
    indep = patch_independence_check(stem, rng.fork("indep"), trials, image_size)
    g = (image_size // 16) ** 2
    mask_token = rng.normal(width)
    dev, failing = 0.0, 0
    crng = rng.fork("commute")
    for _ in range(trials):
        img = crng.normal((1, 3, image_size, image_size))
        mask = sample_mask(crng, g, ratio)
        d = commutation_check(stem, img, mask, mask_token)
        dev = max(dev, d)
        failing += d > 0
    return {"schema_version": "1", "stem": stem_kind, "stem_norm": stem_norm, "width": width,
            "image_size": image_size, "independent": indep["independent"], "max_leakage": indep["max_leakage"],
            "leaking_trials": indep["failing_trials"], "trials": trials, "mask_ratio": ratio,
            "commutation_max_deviation": dev, "commutation_failing_trials": int(failing)}
