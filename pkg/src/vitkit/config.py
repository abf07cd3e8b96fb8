"""Model configuration and the Ti/S/B/L presets."""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass

from .errors import ConfigError

STEM_KINDS = ("linear", "conv", "hmlp")
STEM_NORMS = ("bn", "ln", "none")
STEM_ACTS = ("gelu", "none")

# name: (width, depth, heads)
PRESETS = {
    "ti": (192, 12, 3),
    "s": (384, 12, 6),
    "b": (768, 12, 12),
    "l": (1024, 24, 16),
}
# per-model stochastic depth and base learning rate of the reference recipe
PRESET_SD = {"ti": 0.0, "s": 0.05, "b": 0.1, "l": 0.4}
PRESET_LR = {"ti": 4e-3, "s": 4e-3, "b": 3e-3, "l": 3e-3}


@dataclass(frozen=True)
class ViTConfig:
    width: int
    depth: int
    heads: int
    branches: int = 1
    patch_size: int = 16
    image_size: int = 224
    num_classes: int = 1000
    in_channels: int = 3
    sd_rate: float = 0.0
    layerscale: float | None = None
    stem_kind: str = "linear"
    stem_norm: str | None = None
    stem_act: str | None = None
    dtype: str = "f32"

    @property
    def total_blocks(self) -> int:
        return self.depth * self.branches

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def resolved_stem_norm(self) -> str:
        if self.stem_norm is not None:
            return self.stem_norm
        return "none" if self.stem_kind == "linear" else "bn"

    @property
    def resolved_stem_act(self) -> str:
        if self.stem_act is not None:
            return self.stem_act
        return "none" if self.stem_kind == "linear" else "gelu"

    @property
    def layout(self) -> str:
        return f"{self.depth}x{self.branches}"

    def validate(self) -> "ViTConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for f in ("width", "depth", "heads", "branches", "patch_size", "image_size", "num_classes", "in_channels"):
            need(isinstance(getattr(self, f), int) and getattr(self, f) >= 1, f"{f} must be a positive integer")
        need(self.width % self.heads == 0, f"width {self.width} must be divisible by heads {self.heads}")
        need(self.image_size % self.patch_size == 0,
             f"image_size {self.image_size} must be divisible by patch_size {self.patch_size}")
        need(0.0 <= self.sd_rate < 1.0, f"sd_rate must lie in [0, 1), got {self.sd_rate}")
        need(self.layerscale is None or self.layerscale > 0, "layerscale init must be > 0 when enabled")
        need(self.stem_kind in STEM_KINDS, f"stem_kind must be one of {STEM_KINDS}")
        need(self.resolved_stem_norm in STEM_NORMS, f"stem_norm must be one of {STEM_NORMS}")
        need(self.resolved_stem_act in STEM_ACTS, f"stem_act must be one of {STEM_ACTS}")
        need(self.dtype in ("f32", "f64"), "dtype must be 'f32' or 'f64'")
        if self.stem_kind == "hmlp":
            need(self.width % 4 == 0, f"hmlp stem needs width divisible by 4, got {self.width}")
            need(self.patch_size == 16, "hmlp stem is defined for 16x16 patches only")
        if self.stem_kind == "conv":
            need(self.width % 8 == 0, f"conv stem needs width divisible by 8, got {self.width}")
            need(self.patch_size == 16, "conv stem is defined for 16x16 patches only")
        return self

    def replace(self, **kw) -> "ViTConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def parse_layout(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX×]\s*(\d+)\s*", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise ConfigError(f"layout must look like NxP (e.g. 12x2), got {text!r}")
    return int(m.group(1)), int(m.group(2))


def preset(name: str, layout: str | None = None, **overrides) -> ViTConfig:
    """Config for a named model size; ``layout`` ("NxP") overrides the depth."""
    try:
        width, depth, heads = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(PRESETS)}") from None
    branches = 1
    if layout is not None:
        depth, branches = parse_layout(layout)
    return ViTConfig(width=width, depth=depth, heads=heads, branches=branches, **overrides).validate()
