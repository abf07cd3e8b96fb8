"""Vision transformer with sequential (N x 1) or parallel (N x P) block layouts.

A layer holds P blocks; each block is one pre-norm (MHSA, FFN) pair with its
own norms and optional LayerScale. The sequential forward chains every block:

    x = x + mhsa(x);  x = x + ffn(x)

The parallel forward sums the P branch outputs of a layer into the residual
stream, attention first, then feed-forward:

    x = x + (mhsa_1(x) + ... + mhsa_P(x))
    x = x + (ffn_1(x) + ... + ffn_P(x))

Branch sums run in ascending branch index so results do not depend on how
branches were scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ViTConfig
from .errors import ConfigError, DimensionError
from .rng import Rng
from .stems import Stem, StemSpec, init_stem
from .tensor import Tensor

BLOCK_PARAM_NAMES = (
    "norm1.weight", "norm1.bias",
    "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight", "attn.proj.bias",
    "gamma1",
    "norm2.weight", "norm2.bias",
    "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
    "gamma2",
)


@dataclass
class Block:
    params: dict[str, Tensor]
    heads: int
    sd_rate: float = 0.0

    @property
    def width(self) -> int:
        return self.params["norm1.weight"].shape[0]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def get(self, name: str):
        return self.params.get(name)


@dataclass
class Model:
    config: ViTConfig
    stem: Stem
    cls_token: Tensor
    pos_embed: Tensor
    layers: list[list[Block]]
    norm: dict[str, Tensor]
    head: dict[str, Tensor]

    @property
    def blocks(self) -> list[Block]:
        return [blk for layer in self.layers for blk in layer]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.stem.named_parameters("stem"))
        out.append(("cls_token", self.cls_token))
        out.append(("pos_embed", self.pos_embed))
        for n, layer in enumerate(self.layers):
            for p, blk in enumerate(layer):
                out.extend((f"layers.{n}.{p}.{k}", v) for k, v in blk.params.items())
        out.extend((f"norm.{k}", v) for k, v in self.norm.items())
        out.extend((f"head.{k}", v) for k, v in self.head.items())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(self.stem.named_buffers("stem"))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by canonical name."""
        out = {k: v.data.copy() for k, v in self.named_parameters()}
        out.update({k: v.copy() for k, v in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in state.items():
            if name in targets:
                dst = targets[name]
                if dst.shape != arr.shape:
                    raise DimensionError(f"{name}: shape {arr.shape} does not match model {dst.shape}")
                dst.data = np.array(arr, dtype=dst.dtype, copy=True)
            elif name in buffers:
                buffers[name][...] = arr
            else:
                raise ConfigError(f"unexpected tensor {name!r}")

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self) -> "Model":
        """Deep copy: no tensor or buffer is shared with the original."""
        def ct(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        stem = Stem(self.stem.spec, {k: ct(v) for k, v in self.stem.params.items()},
                    {k: v.copy() for k, v in self.stem.buffers.items()})
        layers = [[Block({k: ct(v) for k, v in b.params.items()}, b.heads, b.sd_rate) for b in layer]
                  for layer in self.layers]
        return Model(self.config, stem, ct(self.cls_token), ct(self.pos_embed), layers,
                     {k: ct(v) for k, v in self.norm.items()}, {k: ct(v) for k, v in self.head.items()})


# -- construction -------------------------------------------------------------

def _init_block(d: int, heads: int, cfg: ViTConfig, rng: Rng, dt) -> Block:
    def w(shape):
        return Tensor(rng.trunc_normal(shape, std=0.02, dtype=dt), requires_grad=True)

    def const(shape, v):
        return Tensor(np.full(shape, v, dtype=dt), requires_grad=True)

    p: dict[str, Tensor] = {}
    p["norm1.weight"], p["norm1.bias"] = const(d, 1.0), const(d, 0.0)
    p["attn.qkv.weight"], p["attn.qkv.bias"] = w((d, 3 * d)), const(3 * d, 0.0)
    p["attn.proj.weight"], p["attn.proj.bias"] = w((d, d)), const(d, 0.0)
    if cfg.layerscale is not None:
        p["gamma1"] = const(d, cfg.layerscale)
    p["norm2.weight"], p["norm2.bias"] = const(d, 1.0), const(d, 0.0)
    p["mlp.fc1.weight"], p["mlp.fc1.bias"] = w((d, 4 * d)), const(4 * d, 0.0)
    p["mlp.fc2.weight"], p["mlp.fc2.bias"] = w((4 * d, d)), const(d, 0.0)
    if cfg.layerscale is not None:
        p["gamma2"] = const(d, cfg.layerscale)
    return Block(p, heads, cfg.sd_rate)


def build_model(config: ViTConfig, rng: Rng) -> Model:
    """Initialize a model: truncated-normal(0.02) weights, zero biases, unit norms."""
    cfg = config.validate()
    dt = T.resolve_dtype(cfg.dtype)
    d = cfg.width
    stem = init_stem(StemSpec.from_config(cfg), rng, cfg.dtype)
    cls_token = Tensor(rng.trunc_normal((1, d), dtype=dt), requires_grad=True)
    pos_embed = Tensor(rng.trunc_normal((cfg.num_patches + 1, d), dtype=dt), requires_grad=True)
    layers = [[_init_block(d, cfg.heads, cfg, rng, dt) for _ in range(cfg.branches)] for _ in range(cfg.depth)]
    norm = {"weight": Tensor(np.ones(d, dt), requires_grad=True),
            "bias": Tensor(np.zeros(d, dt), requires_grad=True)}
    head = {"weight": Tensor(rng.trunc_normal((d, cfg.num_classes), dtype=dt), requires_grad=True),
            "bias": Tensor(np.zeros(cfg.num_classes, dt), requires_grad=True)}
    return Model(cfg, stem, cls_token, pos_embed, layers, norm, head)


# -- residual branches --------------------------------------------------------

def mhsa_forward(block: Block, x: Tensor) -> Tensor:
    """Attention branch output for tokens x of shape (b, T', d); residual not added."""
    b, n, d = x.shape
    h = block.heads
    if d % h:
        raise ConfigError(f"width {d} is not divisible by {h} heads")
    dh = d // h
    y = T.layer_norm(x, block["norm1.weight"], block["norm1.bias"])
    qkv = T.linear(y, block["attn.qkv.weight"], block["attn.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q * (1.0 / math.sqrt(dh)), T.swapaxes(k, -1, -2))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    out = T.linear(out, block["attn.proj.weight"], block["attn.proj.bias"])
    g = block.get("gamma1")
    return out if g is None else out * g


def ffn_forward(block: Block, x: Tensor) -> Tensor:
    y = T.layer_norm(x, block["norm2.weight"], block["norm2.bias"])
    y = T.gelu(T.linear(y, block["mlp.fc1.weight"], block["mlp.fc1.bias"]))
    y = T.linear(y, block["mlp.fc2.weight"], block["mlp.fc2.bias"])
    g = block.get("gamma2")
    return y if g is None else y * g


def stochastic_depth(x: Tensor, rate: float, mode: str, rng: Rng | None) -> Tensor:
    """Drop the whole branch per sample with probability ``rate``; rescale survivors by 1/(1-rate)."""
    if mode != "train" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("stochastic depth in train mode needs an rng")
    keep = rng.uniform((x.shape[0],)) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype).reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return x * scale


# -- forwards -----------------------------------------------------------------

def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def embed(model: Model, images, mode="eval", mask_bits=None, mask_token: Tensor | None = None) -> Tensor:
    """Stem tokens (optionally mask-replaced) with class token prepended and positions added."""
    cfg = model.config
    images = T.as_tensor(images)
    if images.dtype != model.cls_token.dtype:
        images = Tensor(images.data.astype(model.cls_token.dtype))
    if images.ndim != 4 or images.shape[2:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected images (b, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
                             f"got {images.shape}")
    tokens = model.stem(images, mode)
    if mask_bits is not None:
        bits = np.asarray(mask_bits, dtype=bool)
        tokens = T.where(bits[None, :, None], T.reshape(mask_token, (1, 1, -1)), tokens)
    b = tokens.shape[0]
    cls = T.broadcast_to(T.reshape(model.cls_token, (1, 1, cfg.width)), (b, 1, cfg.width))
    x = T.concat([cls, tokens], axis=1)
    return x + model.pos_embed


def run_sequential(model: Model, x: Tensor, mode="eval", rng=None) -> Tensor:
    for blk in model.blocks:
        x = x + stochastic_depth(mhsa_forward(blk, x), blk.sd_rate, mode, rng)
        x = x + stochastic_depth(ffn_forward(blk, x), blk.sd_rate, mode, rng)
    return x


def _branch_sum(fn, layer, x, mode, rng, executor):
    if executor is not None and len(layer) > 1:
        futures = [executor.submit(fn, blk, x) for blk in layer]
        outs = [f.result() for f in futures]
    else:
        outs = [fn(blk, x) for blk in layer]
    acc = None
    for blk, o in zip(layer, outs):
        o = stochastic_depth(o, blk.sd_rate, mode, rng)
        acc = o if acc is None else acc + o
    return acc


def run_parallel(model: Model, x: Tensor, mode="eval", rng=None, executor=None) -> Tensor:
    for layer in model.layers:
        x = x + _branch_sum(mhsa_forward, layer, x, mode, rng, executor)
        x = x + _branch_sum(ffn_forward, layer, x, mode, rng, executor)
    return x


def forward_features(model: Model, images, mode="eval", rng=None, layout="parallel",
                     mask_bits=None, mask_token=None, executor=None) -> Tensor:
    """Final-normed token features (b, T+1, d); row 0 is the class token."""
    _check_mode(mode)
    x = embed(model, images, mode, mask_bits, mask_token)
    if layout == "sequential":
        x = run_sequential(model, x, mode, rng)
    else:
        x = run_parallel(model, x, mode, rng, executor)
    return T.layer_norm(x, model.norm["weight"], model.norm["bias"])


def _logits(model: Model, feats: Tensor) -> Tensor:
    return T.linear(feats[:, 0, :], model.head["weight"], model.head["bias"])


def forward_sequential(model: Model, images, mode="eval", rng=None) -> Tensor:
    """Logits with every block chained one after another (layers flattened in branch order)."""
    return _logits(model, forward_features(model, images, mode, rng, layout="sequential"))


def forward_parallel(model: Model, images, mode="eval", rng=None, executor=None) -> Tensor:
    """Logits with the P blocks of each layer applied in parallel."""
    return _logits(model, forward_features(model, images, mode, rng, layout="parallel", executor=executor))


# -- layout and resolution changes ---------------------------------------------

def regroup(model: Model, branches: int) -> Model:
    """Relabel consecutive blocks l..l+P-1 as the P branches of one layer.

    The returned model shares every tensor with ``model``; nothing is copied.
    """
    blocks = model.blocks
    if branches < 1 or len(blocks) % branches:
        raise ConfigError(f"cannot regroup {len(blocks)} blocks into layers of {branches} branches")
    layers = [blocks[i:i + branches] for i in range(0, len(blocks), branches)]
    cfg = model.config.replace(depth=len(layers), branches=branches)
    return Model(cfg, model.stem, model.cls_token, model.pos_embed, layers, model.norm, model.head)


def _cubic(t, a=-0.75):
    t = abs(t)
    if t <= 1:
        return ((a + 2) * t - (a + 3)) * t * t + 1
    if t < 2:
        return (((t - 5) * t + 8) * t - 4) * a
    return 0.0


def resample_matrix(n_in: int, n_out: int, kernel="bicubic") -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centers, edge-clamped."""
    r = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if kernel == "bicubic":
            x0 = math.floor(src)
            t = src - x0
            taps = [(x0 - 1, _cubic(t + 1)), (x0, _cubic(t)), (x0 + 1, _cubic(1 - t)), (x0 + 2, _cubic(2 - t))]
        elif kernel == "bilinear":
            src = max(src, 0.0)
            x0 = math.floor(src)
            t = src - x0
            taps = [(x0, 1 - t), (x0 + 1, t)]
        else:
            raise ConfigError(f"unknown interpolation kernel {kernel!r}")
        for j, wgt in taps:
            r[i, min(max(j, 0), n_in - 1)] += wgt
    return r


def interpolate_pos_embed(model: Model, new_image_size: int, kernel="bicubic") -> Model:
    """Copy of ``model`` at a new resolution; the class-token row is kept as is."""
    cfg = model.config
    if new_image_size % cfg.patch_size:
        raise ConfigError(f"image size {new_image_size} is not divisible by patch size {cfg.patch_size}")
    out = model.clone()
    out.config = cfg.replace(image_size=new_image_size)
    if new_image_size == cfg.image_size:
        return out
    g_old, g_new = cfg.grid, new_image_size // cfg.patch_size
    pe = model.pos_embed.data
    grid = pe[1:].reshape(g_old, g_old, -1).astype(np.float64)
    r = resample_matrix(g_old, g_new, kernel)
    new_grid = np.einsum("ij,jkd,lk->ild", r, grid, r).reshape(g_new * g_new, -1)
    new_pe = np.concatenate([pe[:1], new_grid.astype(pe.dtype)], axis=0)
    out.pos_embed = Tensor(new_pe, requires_grad=model.pos_embed.requires_grad)
    return out
