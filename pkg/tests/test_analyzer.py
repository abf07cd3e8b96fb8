import json

import numpy as np
import pytest

from vitkit import Rng, ViTConfig, build_model, count_flops, count_params, flops_oracle, preset, regroup
from vitkit.analyzer import memory_estimate, scaling_table
from vitkit.errors import ConfigError
from vitkit.tensor import Tensor, count_macs, matmul


def test_table_param_counts():
    assert abs(count_params(preset("l")).params_total / 1e6 - 304.4) <= 0.1
    assert abs(count_params(preset("ti")).params_total / 1e6 - 5.7) <= 0.05


def test_totals_equal_component_sums():
    for cfg in (preset("b"), preset("s", stem_kind="hmlp"), preset("ti", layout="6x2", stem_kind="conv")):
        rep = count_flops(cfg, 224)
        assert rep.params_total == sum(v for k, v in rep.params_by_component.items() if k != "per_layer")
        assert rep.flops_total == sum(v for k, v in rep.flops_by_component.items() if k != "per_block")


@pytest.mark.parametrize("stem", ["linear", "hmlp"])
def test_b12_flops(stem):
    target = {"linear": 17.58, "hmlp": 17.73}[stem]
    assert abs(count_flops(preset("b", stem_kind=stem), 224).flops_total / 1e9 / target - 1) < 0.01


def test_block_closed_form():
    d, n = 768, 197
    rep = count_flops(preset("b"), 224)
    assert rep.flops_by_component["blocks"] == 12 * (n * 12 * d * d + 2 * n * n * d)


def test_invalid_config():
    with pytest.raises(ConfigError):
        count_params(ViTConfig(width=10, depth=1, heads=3))


def test_oracle_single_matmul():
    with count_macs() as c:
        matmul(Tensor(np.ones((3, 7))), Tensor(np.ones((7, 2))))
    assert c.total == 42


@pytest.mark.parametrize("stem", ["linear", "hmlp", "conv"])
def test_oracle_matches_closed_form(stem):
    cfg = ViTConfig(width=16, depth=2, heads=2, image_size=64, num_classes=5, stem_kind=stem)
    m = build_model(cfg, Rng(0))
    assert flops_oracle(m, np.zeros((1, 3, 64, 64), np.float32)) == count_flops(cfg).flops_total


def test_oracle_regroup_equal():
    cfg = ViTConfig(width=8, depth=24, heads=2, image_size=32, num_classes=3)
    m = build_model(cfg, Rng(1))
    x = np.zeros((1, 3, 32, 32), np.float32)
    assert flops_oracle(regroup(m, 2), x) == flops_oracle(m, x)


def test_layout_invariance_analytic():
    base = preset("b")
    ref = count_flops(base.replace(depth=24), 224)
    other = count_flops(base.replace(depth=12, branches=2), 224)
    assert (ref.params_total, ref.flops_total) == (other.params_total, other.flops_total)


def test_scaling_tables():
    depth = scaling_table(preset("b"), "depth", [6, 12, 24], 224)
    rows = depth["rows"]
    assert rows[1]["block_params"] == 2 * rows[0]["block_params"]
    assert depth["ok"]
    width = scaling_table(preset("s"), "width", [384, 768])
    assert 3.9 <= width["rows"][1]["block_params"] / width["rows"][0]["block_params"] <= 4.1
    assert width["ok"]
    totals = [count_params(preset(k)).params_total / 1e6 for k in ("ti", "s", "b", "l")]
    assert [round(t, 1) for t in totals] == [5.7, 22.1, 86.6, 304.3]


def test_memory_estimate_properties():
    cfg = preset("b")
    a = memory_estimate(cfg, 224, 1)
    assert memory_estimate(cfg.replace(depth=24), 224, 1)["activation_bytes"] == a["activation_bytes"]
    assert memory_estimate(cfg, 224, 2)["activation_bytes"] == 2 * a["activation_bytes"]
    wide = memory_estimate(cfg.replace(width=1536, heads=24), 224, 1)
    assert 2 <= wide["activation_bytes"] / a["activation_bytes"] <= 4
    assert a["dominant"] in ("tokens", "attention_matrix")


def test_report_json_round_trip():
    rep = count_flops(preset("ti"), 224)
    d = json.loads(rep.to_json())
    assert d["schema_version"] == "1" and d["flops_total"] == rep.flops_total
    assert "MAC" in rep.to_text()
