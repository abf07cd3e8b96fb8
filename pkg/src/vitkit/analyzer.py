"""Closed-form parameter and FLOP accounting.

FLOPs follow the multiply-accumulate convention: one MAC counts as one FLOP,
and only matrix products and convolutions are counted (softmax, GELU, norms,
residual adds and biases are free). Under this convention ViT-B/16 at 224x224
costs about 17.56 G. Stem and classifier head are included.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .config import ViTConfig
from .errors import ConfigError
from .stems import StemSpec

CONVENTION = "MAC (1 multiply-accumulate = 1 FLOP); matmul/conv only; stem and head included"


@dataclass
class ComplexityReport:
    config: dict
    resolution: int
    token_count: int
    params_total: int
    params_by_component: dict
    flops_total: int
    flops_by_component: dict
    convention: str = CONVENTION
    schema_version: str = "1"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_text(self) -> str:
        cfg = self.config
        rows = [("component", "params", "MACs")]
        for key in ("stem", "pos_cls", "blocks", "final_norm", "head"):
            rows.append((key, f"{self.params_by_component[key]:,}", f"{self.flops_by_component.get(key, 0):,}"))
        rows.append(("total", f"{self.params_total:,}", f"{self.flops_total:,}"))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"ViT d={cfg['width']} layout={cfg['depth']}x{cfg['branches']} heads={cfg['heads']} "
                 f"stem={cfg['stem_kind']} res={self.resolution} tokens={self.token_count}",
                 f"# {self.convention}"]
        for i, r in enumerate(rows):
            lines.append(f"{r[0]:<{w[0]}}  {r[1]:>{w[1]}}  {r[2]:>{w[2]}}")
            if i == 0 or i == len(rows) - 2:
                lines.append("-" * (sum(w) + 4))
        lines.append(f"params {self.params_total / 1e6:.1f}M   GFLOPs {self.flops_total / 1e9:.2f}")
        return "\n".join(lines)


def block_params(d: int, layerscale: bool = False) -> dict:
    return {"mhsa": 4 * d * d + 4 * d, "ffn": 8 * d * d + 5 * d, "norms": 4 * d,
            "layerscale": 2 * d if layerscale else 0}


def stem_params(spec: StemSpec) -> int:
    n = 0
    for _, cin, cout, k, _, _ in spec.conv_layers():
        n += cout * cin * k * k + cout
        if spec.norm != "none":
            n += 2 * cout
    return n


def stem_macs(spec: StemSpec, resolution: int) -> int:
    """Exact convolution arithmetic; the linear stem is a k=s=patch convolution."""
    n, h = 0, resolution
    for _, cin, cout, k, s, pad in spec.conv_layers():
        h = (h + 2 * pad - k) // s + 1
        n += h * h * cout * cin * k * k
    return n


def _analyze(config: ViTConfig, resolution: int | None = None) -> ComplexityReport:
    cfg = config.validate()
    res = cfg.image_size if resolution is None else resolution
    if res % cfg.patch_size:
        raise ConfigError(f"resolution {res} is not divisible by patch size {cfg.patch_size}")
    d, c = cfg.width, cfg.num_classes
    spec = StemSpec.from_config(cfg)
    t = (res // cfg.patch_size) ** 2
    n_tok = t + 1

    bp = block_params(d, cfg.layerscale is not None)
    per_layer = {k: v * cfg.branches for k, v in bp.items()}
    params = {
        "stem": stem_params(spec),
        # positional table is sized for the config's own resolution
        "pos_cls": (cfg.num_patches + 1) * d + d,
        "blocks": sum(bp.values()) * cfg.total_blocks,
        "per_layer": per_layer,
        "final_norm": 2 * d,
        "head": d * c + c,
    }
    block_flops = n_tok * 12 * d * d + 2 * n_tok * n_tok * d
    flops = {
        "stem": stem_macs(spec, res),
        "blocks": block_flops * cfg.total_blocks,
        "per_block": {"mhsa": n_tok * 4 * d * d + 2 * n_tok * n_tok * d, "ffn": n_tok * 8 * d * d},
        "head": d * c,
    }
    params_total = params["stem"] + params["pos_cls"] + params["blocks"] + params["final_norm"] + params["head"]
    flops_total = flops["stem"] + flops["blocks"] + flops["head"]
    return ComplexityReport(cfg.to_dict(), res, n_tok, params_total, params, flops_total, flops)


def count_params(config: ViTConfig) -> ComplexityReport:
    """Full report at the config's own resolution; ``params_total`` is exact."""
    return _analyze(config)


def count_flops(config: ViTConfig, resolution: int | None = None) -> ComplexityReport:
    return _analyze(config, resolution)


def flops_oracle(model, images) -> int:
    """MACs counted by instrumenting every matmul/conv call of one eval forward."""
    from .model import forward_parallel

    with T.no_grad(), T.count_macs() as counter:
        forward_parallel(model, images, mode="eval")
    return counter.total


def _r2(x, y) -> tuple[float, float, float]:
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return r2, float(slope), float(intercept)


def scaling_table(base: ViTConfig, axis: str, values, resolution: int | None = None) -> dict:
    """Params/FLOPs across a depth or width sweep with a fit of the dominant term.

    Depth sweeps regress block totals on depth; width sweeps regress them on d^2.
    """
    if axis not in ("depth", "width"):
        raise ConfigError(f"axis must be 'depth' or 'width', got {axis!r}")
    rows = []
    for v in values:
        if axis == "depth":
            cfg = base.replace(depth=int(v))
        else:
            heads = base.heads if v % base.heads == 0 else math.gcd(int(v), base.heads)
            cfg = base.replace(width=int(v), heads=heads)
        rep = count_flops(cfg, resolution)
        rows.append({axis: int(v), "params_total": rep.params_total, "block_params": rep.params_by_component["blocks"],
                     "flops_total": rep.flops_total, "block_flops": rep.flops_by_component["blocks"]})
    xs = [r[axis] if axis == "depth" else r[axis] ** 2 for r in rows]
    fits = {}
    for key in ("block_params", "block_flops"):
        r2, slope, icpt = _r2(xs, [r[key] for r in rows])
        fits[key] = {"regressor": axis if axis == "depth" else "width^2", "r2": r2, "slope": slope,
                     "intercept": icpt}
    return {"axis": axis, "rows": rows, "fits": fits,
            "ok": all(f["r2"] > 0.999 for f in fits.values())}


def memory_estimate(config: ViTConfig, resolution: int | None = None, batch: int = 1,
                    exec_mode: str = "seq") -> dict:
    """Inference peak-memory model in bytes: all weights + the largest live block working set.

    Working set of one attention branch: residual stream, qkv and the
    (heads, n, n) score matrix; of one FFN branch: residual stream and the 4d
    hidden layer. Only one block is live at a time, hence no depth dependence.
    With ``exec_mode='par'`` the P branches of a layer are live together.
    Not calibrated against any measured figure.
    """
    cfg = config.validate()
    res = cfg.image_size if resolution is None else resolution
    n = (res // cfg.patch_size) ** 2 + 1
    d, h = cfg.width, cfg.heads
    item = 4 if cfg.dtype == "f32" else 8
    live = cfg.branches if exec_mode == "par" else 1
    residual = n * d
    attn_tokens, attn_matrix = 3 * n * d * live, h * n * n * live
    ffn_tokens = 4 * n * d * live
    attn_stage = residual + attn_tokens + attn_matrix
    ffn_stage = residual + ffn_tokens
    peak = max(attn_stage, ffn_stage)
    act = batch * peak * item
    params = count_params(cfg).params_total * item
    token_part = residual + (attn_tokens if attn_stage >= ffn_stage else ffn_tokens)
    matrix_part = attn_matrix if attn_stage >= ffn_stage else 0
    return {
        "param_bytes": params,
        "activation_bytes": act,
        "total_bytes": params + act,
        "token_bytes": batch * token_part * item,
        "attention_matrix_bytes": batch * matrix_part * item,
        "dominant": "attention_matrix" if matrix_part > token_part else "tokens",
        "peak_stage": "attention" if attn_stage >= ffn_stage else "ffn",
        "batch": batch, "resolution": res, "exec_mode": exec_mode,
    }
