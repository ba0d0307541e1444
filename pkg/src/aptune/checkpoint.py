"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"APTC"  u32 version
    u32 n  + n bytes   JSON header {"config", "head", "meta"} (sorted keys)
    u16 n  + n bytes   gate mode tag
    u32 tensor count
    per tensor: u16 n + name, u32 rank, rank x u32 extents, float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gating import PrefixGates
from .numerics import Tensor
from .transformer import Backbone, ModelConfig

MAGIC = b"APTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    head_kind: str
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.config.mode


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "head": {"kind": ckpt.head_kind}, "meta": ckpt.meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    mode = ckpt.mode.encode()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    out += [struct.pack("<H", len(mode)), mode, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<I", arr.ndim)]
        out += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an APTC checkpoint (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = take("<I")
    header = json.loads(blob[pos:pos + n])
    pos += n
    (n,) = take("<H")
    mode = blob[pos:pos + n].decode()
    pos += n
    config = ModelConfig.from_dict(header["config"])
    if config.mode != mode:
        raise CheckpointError(f"mode tag {mode!r} disagrees with config mode {config.mode!r}")
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = blob[pos:pos + n].decode()
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        tensors[name] = arr
    if pos != len(blob):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(config, tensors, header["head"]["kind"], header.get("meta", {}))


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def from_model(model, meta: dict | None = None) -> Checkpoint:
    tensors = {name: t.data.astype(np.float32) for name, t in model.named_tensors()}
    return Checkpoint(model.config, tensors, model.task_kind, dict(meta or {}))


def to_model(ckpt: Checkpoint, dtype=np.float32):
    """Rebuild a model with a frozen backbone and trainable prefix/gate/head."""
    from .training import PrefixModel, TaskHead

    def tensor(name, trainable):
        return Tensor(ckpt.tensors[name], requires_grad=trainable, dtype=dtype)

    names = list(ckpt.tensors)
    backbone = Backbone.from_tensors(
        {n: tensor(n, False) for n in names if n.startswith("backbone.")}, ckpt.config.num_layers
    )
    gates = PrefixGates.from_tensors(
        ckpt.config, {n: tensor(n, True) for n in names if n.startswith(("prefix.", "gate."))}
    )
    head = TaskHead(ckpt.head_kind, tensor("head.weight", True), tensor("head.bias", True))
    return PrefixModel(ckpt.config, backbone, gates, head)


def load_backbone(path) -> Backbone:
    ckpt = load(path)
    return Backbone.from_tensors(
        {n: Tensor(a) for n, a in ckpt.tensors.items() if n.startswith("backbone.")}, ckpt.config.num_layers
    )
