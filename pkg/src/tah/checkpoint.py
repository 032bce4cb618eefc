"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TAH1"
    u32 header length, header bytes (UTF-8 JSON, sorted keys)
    u32 record count
    per record, sorted by name:
        u32 name length, name bytes (UTF-8)
        u8  dtype tag (0 float32, 1 float64, 2 int64)
        u8  ndim, ndim x u64 extents
        row-major little-endian payload

Backbone tensors are stored under ``backbone.``, the decider under
``decider.`` and optimizer moments under ``optim.``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"TAH1"
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_NP = {0: "<f4", 1: "<f8", 2: "<i8"}
_TORCH = {v: k for k, v in _TAGS.items()}


@dataclass
class Checkpoint:
    header: dict[str, Any]
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = sorted(ckpt.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        tag = _TAGS[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.numpy().astype(_NP[tag], copy=False).tobytes(order="C"))
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not a TAH1 checkpoint")
    off = 4
    try:
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            dt = np.dtype(_NP[tag])
            size = int(np.prod(shape)) * dt.itemsize
            arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
            off += size
            tensors[name] = torch.from_numpy(arr.copy()).to(_TORCH[tag])
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if off != len(data):
        raise CheckpointError("trailing bytes after last record")
    return Checkpoint(header, tensors)


def save(path: str | Path, ckpt: Checkpoint) -> bytes:
    data = encode(ckpt)
    Path(path).write_bytes(data)
    return data


def load(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(str(e)) from e
    return decode(data)


def digest(data: bytes, n: int = 12) -> str:
    return hashlib.sha256(data).hexdigest()[:n]


def tensors_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_content_addressed(directory: str | Path, stem: str, ckpt: Checkpoint) -> Path:
    """Write ``<stem>-<sha12>.tah``; identical content maps to the same file."""
    data = encode(ckpt)
    path = Path(directory) / f"{stem}-{digest(data)}.tah"
    if not path.exists():
        path.write_bytes(data)
    return path


def model_checkpoint(model, decider=None, meta: dict | None = None,
                     extra: dict[str, torch.Tensor] | None = None, kind: str = "backbone") -> Checkpoint:
    from .config import to_dict

    tensors = {f"backbone.{k}": v.detach().clone() for k, v in model.state_dict().items()}
    header: dict[str, Any] = {"kind": kind, "model": to_dict(model.config), "meta": meta or {}}
    if decider is not None:
        tensors.update({f"decider.{k}": v.detach().clone() for k, v in decider.state_dict().items()})
        header["decider"] = True
    tensors.update(extra or {})
    return Checkpoint(header, tensors)


def restore(ckpt: Checkpoint):
    """Rebuild (model, decider-or-None) from a checkpoint."""
    from .backbone import TaHModel
    from .config import model_config_from_dict
    from .decider import IterationDecider

    cfg = model_config_from_dict(ckpt.header["model"])
    model = TaHModel(cfg)
    missing = model.load_state_dict(ckpt.section("backbone"), strict=True)
    if missing.missing_keys or missing.unexpected_keys:
        raise CheckpointError(f"parameter mismatch: {missing}")
    decider = None
    if ckpt.header.get("decider"):
        decider = IterationDecider(cfg)
        decider.load_state_dict(ckpt.section("decider"), strict=True)
    return model, decider
