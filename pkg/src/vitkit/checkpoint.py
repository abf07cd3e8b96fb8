"""VTC1 checkpoint files.

Layout (all integers little-endian)::

    0      4 bytes   magic b"VTC1"
    4      8 bytes   uint64 header length H
    12     H bytes   UTF-8 JSON: {"config": {...}, "manifest": [...]}, keys sorted,
                     no whitespace
    ...    zero padding up to the next multiple of 64 -> payload start
    payload          raw little-endian f32/f64 values

Each manifest entry is ``{"name", "kind", "shape", "dtype", "offset", "nbytes"}``
with ``offset`` relative to the payload start and a multiple of 64. Entries
appear in model inventory order: parameters first, then buffers.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .config import ViTConfig
from .errors import FormatError
from .model import Model, build_model
from .rng import Rng
from .tensor import dtype_name

MAGIC = b"VTC1"
ALIGN = 64


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(model: Model, path) -> None:
    entries = [(n, "param", t.data) for n, t in model.named_parameters()]
    entries += [(n, "buffer", a) for n, a in model.named_buffers()]
    manifest, offset = [], 0
    for name, kind, arr in entries:
        manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "dtype": dtype_name(arr.dtype),
                         "offset": offset, "nbytes": int(arr.nbytes)})
        offset = _align(offset + arr.nbytes)
    header = json.dumps({"config": model.config.to_dict(), "manifest": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    start = _align(12 + len(header))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(b"\0" * (start - 12 - len(header)))
        pos = 0
        for (_, _, arr), ent in zip(entries, manifest):
            f.write(b"\0" * (ent["offset"] - pos))
            f.write(_le(arr).tobytes())
            pos = ent["offset"] + ent["nbytes"]


def read_header(path) -> tuple[dict, int, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    if 12 + hlen > len(blob):
        raise FormatError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    return header, _align(12 + hlen), blob


def load_checkpoint(path) -> Model:
    header, start, blob = read_header(path)
    try:
        cfg = ViTConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from None
    model = build_model(cfg, Rng(0))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = len(params) + len(buffers)
    if len(manifest) != expected:
        raise FormatError(f"{path}: manifest has {len(manifest)} tensors, model inventory has {expected}")
    payload = len(blob) - start
    end_prev, seen = 0, set()
    for ent in manifest:
        name = ent["name"]
        if name in seen:
            raise FormatError(f"{path}: tensor {name} listed twice")
        seen.add(name)
        target = params[name].data if name in params else buffers.get(name)
        if target is None:
            raise FormatError(f"{path}: tensor {name} is not part of the model")
        shape = tuple(ent["shape"])
        if shape != target.shape:
            raise FormatError(f"{path}: tensor {name} has shape {shape}, config implies {target.shape}")
        dt = np.dtype({"f32": "<f4", "f64": "<f8"}.get(ent["dtype"], "V"))
        if dt.kind != "f":
            raise FormatError(f"{path}: tensor {name} has unknown dtype {ent['dtype']!r}")
        if dt.newbyteorder("=") != target.dtype:
            raise FormatError(f"{path}: tensor {name} is {ent['dtype']}, config dtype is {cfg.dtype}")
        off, nbytes = int(ent["offset"]), int(ent["nbytes"])
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: tensor {name} byte size {nbytes} disagrees with shape {shape}")
        if off < end_prev or off % ALIGN:
            raise FormatError(f"{path}: tensor {name} offset {off} overlaps previous tensor or is misaligned")
        if off + nbytes > payload:
            raise FormatError(f"{path}: tensor {name} runs past end of payload")
        end_prev = off + nbytes
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=start + off).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        if name in params:
            params[name].data = arr.copy()
        else:
            buffers[name][...] = arr
    return model
