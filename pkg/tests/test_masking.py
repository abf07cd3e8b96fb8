import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitkit import (PatchMask, Rng, StemSpec, ViTConfig, apply_mask_pixels, apply_mask_tokens, build_model,
                    commutation_check, init_stem, mim_loss, sample_mask)
from vitkit.errors import ConfigError, DimensionError
from vitkit.masking import init_mim_head, patch_targets
from vitkit.optim import OptimizerConfig, make_optimizer
from vitkit.tensor import Tensor


def test_sample_mask_counts_and_determinism():
    assert sample_mask(Rng(0), 196, 0.0).num_masked == 0
    assert sample_mask(Rng(0), 196, 0.4).num_masked == 78
    assert np.array_equal(sample_mask(Rng(5), 50, 0.3).bits, sample_mask(Rng(5), 50, 0.3).bits)
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ConfigError):
            sample_mask(Rng(0), 10, bad)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.floats(0, 0.99), st.integers(0, 1000))
def test_mask_ratio_within_one_patch(n, ratio, seed):
    m = sample_mask(Rng(seed), n, ratio)
    assert abs(m.num_masked / n - ratio) <= 1 / n


def test_apply_mask_tokens():
    tok = Rng(1).normal((2, 5, 4))
    token = np.full(4, 9.0)
    empty = PatchMask(np.zeros(5, bool), 0.0)
    assert np.array_equal(apply_mask_tokens(Tensor(tok), empty, token).data, tok)
    bits = np.array([1, 1, 0, 1, 1], bool)
    out = apply_mask_tokens(Tensor(tok), PatchMask(bits, 0.8), token).data
    assert np.array_equal(out[:, 2], tok[:, 2])
    assert np.all(out[:, bits] == 9.0)
    with pytest.raises(DimensionError):
        apply_mask_tokens(Tensor(tok), PatchMask(np.zeros(4, bool), 0.0), token)


def test_apply_mask_pixels():
    img = Rng(2).normal((1, 3, 32, 32))
    assert np.array_equal(apply_mask_pixels(img, PatchMask(np.zeros(4, bool), 0.0), 16), img)
    assert not apply_mask_pixels(img, PatchMask(np.ones(4, bool), 0.99), 16).any()
    out = apply_mask_pixels(img, PatchMask(np.array([0, 1, 0, 0], bool), 0.25), 16)
    assert np.array_equal(out[..., :16, :16], img[..., :16, :16])
    assert not out[..., :16, 16:].any()
    with pytest.raises(DimensionError):
        apply_mask_pixels(img, PatchMask(np.zeros(9, bool), 0.0), 16)


def _stem(kind, norm):
    s = init_stem(StemSpec(kind, norm, "none" if kind == "linear" else "gelu", 32, 16, 3), Rng(3), "f64")
    for name, arr in s.buffers.items():
        arr[...] = 1.3 if name.endswith("var") else 0.2
    return s


@pytest.mark.parametrize("kind,norm", [("hmlp", "ln"), ("hmlp", "bn"), ("linear", "none")])
def test_commutation_exact_for_local_stems(kind, norm):
    s = _stem(kind, norm)
    rng = Rng(4)
    for _ in range(10):
        img = rng.normal((1, 3, 64, 64))
        assert commutation_check(s, img, sample_mask(rng, 16, 0.4), rng.normal(32)) == 0.0


def test_commutation_fails_for_conv_stem():
    s = _stem("conv", "bn")
    rng = Rng(5)
    devs = [commutation_check(s, rng.normal((1, 3, 64, 64)), sample_mask(rng, 16, 0.4), rng.normal(32))
            for _ in range(10)]
    assert max(devs) > 0


def _mim_setup(dtype="f64"):
    cfg = ViTConfig(width=16, depth=2, heads=2, image_size=32, num_classes=10, dtype=dtype)
    model = build_model(cfg, Rng(6))
    head = init_mim_head(16, Rng(7), dtype=dtype)
    return model, head


def test_mim_loss_zero_and_unit():
    model, head = _mim_setup()
    x = Rng(8).normal((2, 3, 32, 32))
    mask = PatchMask(np.array([1, 0, 1, 0], bool), 0.5)
    head.weight.data[...] = 0
    head.bias.data[...] = 0
    assert float(mim_loss(model, x, mask, head, "eval").data) == pytest.approx(1.0, abs=1e-4)
    zeros = np.zeros((2, 4, 768))
    assert float(mim_loss(model, x, mask, head, "eval", targets=zeros).data) == 0.0
    with pytest.raises(ConfigError):
        mim_loss(model, x, PatchMask(np.zeros(4, bool), 0.0), head)


def test_patch_targets_normalized():
    t = patch_targets(Rng(9).normal((2, 3, 32, 32)) * 5 + 3)
    assert np.allclose(t.mean(-1), 0, atol=1e-9)
    assert np.allclose(t.var(-1), 1, atol=1e-4)


def test_mim_loss_ignores_masked_pixels():
    model, head = _mim_setup()
    x = Rng(10).normal((1, 3, 32, 32))
    mask = PatchMask(np.array([0, 1, 1, 0], bool), 0.5)
    tgt = patch_targets(x)
    y = x.copy()
    y[..., :16, 16:] = Rng(11).normal((1, 3, 16, 16))
    a = float(mim_loss(model, x, mask, head, "eval", targets=tgt).data)
    b = float(mim_loss(model, y, mask, head, "eval", targets=tgt).data)
    assert a == b


def test_mim_overfits_fixed_batch():
    cfg = ViTConfig(width=32, depth=2, heads=2, image_size=32, num_classes=10)
    model = build_model(cfg, Rng(0))
    head = init_mim_head(32, Rng(1))
    x = Rng(2).normal((8, 3, 32, 32), dtype=np.float32)
    mask = sample_mask(Rng(3), 4, 0.5)
    params = model.parameters() + [head.mask_token, head.weight, head.bias]
    opt = make_optimizer(params, OptimizerConfig(lr=1e-3, weight_decay=0.0, schedule="constant"), 200)
    first = None
    for _ in range(200):
        loss = mim_loss(model, x, mask, head, "train")
        first = float(loss.data) if first is None else first
        loss.backward()
        opt.step()
        opt.zero_grad()
    assert float(loss.data) < 0.5 * first
