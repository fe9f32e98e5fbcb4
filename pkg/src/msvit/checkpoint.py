"""Versioned little-endian checkpoint container.

Layout::

    b"MSVT"  u32 version
    u32 len  config (canonical JSON text)
    u32 len  metadata (JSON text)
    u32 count
    count x { u16 len, path utf-8, u8 dtype, u8 ndim, u64 dims[ndim], u64 nbytes, raw }
"""
from __future__ import annotations

import json
import os
import struct
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig
from .model import MSViT, build_model

MAGIC = b"MSVT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def save_checkpoint(model: MSViT, path, meta: Optional[dict] = None,
                    extra: Optional[dict[str, torch.Tensor]] = None) -> None:
    tensors = dict(model.state_dict())
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_blob(fh, model.cfg.canonical().encode())
        _write_blob(fh, json.dumps(meta or {}, sort_keys=True).encode())
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().contiguous().numpy()
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            raw = arr.astype(_DTYPES[code], copy=False).tobytes()
            key = name.encode()
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MSVT checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    cfg = ModelConfig.from_dict(json.loads(r.take(n)))
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return cfg, meta, tensors


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> MSViT:
    """Rebuild the stored model. With ``expected``, the stored config must match."""
    model, _, _ = load_checkpoint_full(path, expected)
    return model


def load_checkpoint_full(path, expected: Optional[ModelConfig] = None):
    cfg, meta, tensors = read_checkpoint(path)
    if expected is not None and expected.digest() != cfg.digest():
        diff = sorted(k for k, v in expected.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: config hash mismatch (differs in {', '.join(diff)})")
    model = build_model(cfg)
    state = {k: v for k, v in tensors.items() if not k.startswith("extra/")}
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("extra/")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: weights do not fit config: {e}") from None
    return model, meta, extra
