import numpy as np
import pytest

from vitkit import Rng, StemSpec, init_stem, patch_independence_check
from vitkit import tensor as T
from vitkit.analyzer import stem_macs
from vitkit.errors import ConfigError, DimensionError
from vitkit.stems import conv_stem, hmlp_stem, linear_stem
from vitkit.tensor import Tensor


def stem(kind, norm="bn", d=32, seed=0, dtype="f64"):
    act = "none" if kind == "linear" else "gelu"
    s = init_stem(StemSpec(kind, norm, act, d, 16, 3), Rng(seed), dtype)
    for name, arr in s.buffers.items():
        arr[...] = Rng(seed + 1).uniform(arr.shape, 0.5, 1.5) if name.endswith("var") else Rng(seed + 2).normal(arr.shape)
    return s


def test_linear_token_count_and_zero():
    s = stem("linear", "none", d=16)
    assert s(np.zeros((1, 3, 224, 224)), "eval").shape == (1, 196, 16)
    for t in s.params.values():
        t.data[...] = 0
    assert not s(Rng(0).normal((1, 3, 32, 32))).data.any()


def test_linear_equals_strided_conv():
    s = stem("linear", "none", d=16)
    x = Rng(1).normal((2, 3, 32, 32))
    w = s.params["proj.weight"].data  # (c*p*p, d) in (c, y, x) order
    kernel = w.T.reshape(16, 3, 16, 16)
    ref = T.conv2d(Tensor(x), Tensor(kernel), Tensor(s.params["proj.bias"].data), stride=16).data
    ref = ref.reshape(2, 16, 4).transpose(0, 2, 1)
    assert np.allclose(s(x).data, ref, atol=1e-6)


def test_indivisible_image():
    with pytest.raises(DimensionError):
        stem("linear", "none")(np.zeros((1, 3, 40, 40)))


def test_hmlp_stage_extents():
    spec = StemSpec("hmlp", "bn", "gelu", 768, 16, 3)
    layers = spec.conv_layers()
    assert [(k, s) for _, _, _, k, s, _ in layers] == [(4, 4), (2, 2), (2, 2)]
    assert [cout for _, _, cout, *_ in layers] == [192, 192, 768]
    size = 224
    extents = []
    for _, _, cout, k, s, pad in layers:
        size = (size + 2 * pad - k) // s + 1
        extents.append((size, size, cout))
    assert extents == [(56, 56, 192), (28, 28, 192), (14, 14, 768)]


def test_hmlp_overhead_under_one_percent():
    lin = stem_macs(StemSpec("linear", "none", "none", 768, 16, 3), 224)
    hm = stem_macs(StemSpec("hmlp", "bn", "gelu", 768, 16, 3), 224)
    assert 0.13e9 < hm - lin < 0.16e9
    assert (hm - lin) / 17.58e9 < 0.01


def test_conv_stem_overhead_scale():
    lin = stem_macs(StemSpec("linear", "none", "none", 768, 16, 3), 224)
    cv = stem_macs(StemSpec("conv", "bn", "gelu", 768, 16, 3), 224)
    assert abs((cv - lin) / 1.49e9 - 1) < 0.05
    s = stem("conv", d=16)
    assert s(np.zeros((1, 3, 224, 224))).shape == (1, 196, 16)


def test_config_violations():
    with pytest.raises(ConfigError):
        StemSpec("hmlp", "bn", "gelu", 30, 16, 3).validate()
    with pytest.raises(ConfigError):
        StemSpec("hmlp", "bn", "gelu", 32, 8, 3).validate()
    with pytest.raises(ConfigError):
        StemSpec("conv", "bn", "gelu", 36, 16, 3).validate()


def test_conv_zero_weights():
    s = stem("conv", "ln", d=16)
    for t in s.params.values():
        t.data[...] = 0
    assert not s(Rng(3).normal((1, 3, 64, 64))).data.any()


@pytest.mark.parametrize("norm", ["ln", "bn"])
def test_hmlp_single_patch_perturbation(norm):
    s = stem("hmlp", norm)
    x = Rng(4).normal((1, 3, 64, 64))
    y = x.copy()
    y[:, :, 16:32, 32:48] += 1.0  # patch (1, 2) -> token 6
    a, b = s(x).data[0], s(y).data[0]
    changed = np.flatnonzero(np.any(a != b, axis=-1))
    assert changed.tolist() == [6]


def test_conv_stem_leaks_to_neighbours():
    s = stem("conv", "bn")
    x = Rng(5).normal((1, 3, 64, 64))
    y = x.copy()
    y[:, :, 16:32, 16:32] += 1.0  # interior patch (1, 1) -> token 5
    diff = np.any(s(x).data[0] != s(y).data[0], axis=-1)
    assert diff[5] and diff[[1, 4, 6, 9]].any()


def test_patch_independence_reports():
    assert patch_independence_check(stem("hmlp", "ln"), Rng(6), trials=20)["max_leakage"] == 0.0
    assert patch_independence_check(stem("linear", "none"), Rng(6), trials=20)["independent"]
    rep = patch_independence_check(stem("conv", "bn"), Rng(6), trials=10)
    assert not rep["independent"] and rep["max_leakage"] > 0 and rep["failing_trials"] >= 1


def test_bn_train_mode_is_rejected_for_independence():
    with pytest.raises(ConfigError):
        patch_independence_check(stem("hmlp", "bn"), Rng(0), trials=1, mode="train")


def test_named_stem_functions_agree_with_stem_object():
    x = Rng(7).normal((1, 3, 32, 32))
    for kind, fn in (("linear", linear_stem), ("hmlp", hmlp_stem), ("conv", conv_stem)):
        s = stem(kind, "ln" if kind != "linear" else "none", d=16)
        assert np.array_equal(fn(x, s.params, s.spec, s.buffers).data, s(x).data)
