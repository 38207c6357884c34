"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic    b"HHCKPT\\0\\1"
    u32      format version
    u32 n    + n bytes   model config, canonical key=value text
    u32 n    + n bytes   metadata, JSON with sorted keys
    u32      number of tensors
    per tensor:
      u16 n  + n bytes   name (utf-8)
      u8                 dtype code (0=<f8, 1=<f4, 2=<f2, 3=<i8)
      u8                 ndim
      u64 * ndim         shape
      raw                C-order little-endian data
    32 bytes             sha256 of everything above

Parameters are stored under their model names. A precomputed meta-token
initialisation, if present, is stored under ``init.kv.<group>.k``,
``init.kv.<group>.v``, ``init.ssm.<layer>.h`` and ``init.ssm.<layer>.conv``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import SSMState
from .config import ModelConfig
from .meta_tokens import PrecomputedInit
from .model import Model, build

__all__ = ["CheckpointError", "Checkpoint", "dumps", "loads", "save", "load"]

MAGIC = b"HHCKPT\x00\x01"
VERSION = 1
_DTYPES = [np.dtype("<f8"), np.dtype("<f4"), np.dtype("<f2"), np.dtype("<i8")]


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint bytes."""


@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)
    init: PrecomputedInit | None = None


def _init_tensors(init: PrecomputedInit) -> list[tuple[str, np.ndarray]]:
    out = []
    for g in sorted(init.kv):
        k, v = init.kv[g]
        out += [(f"init.kv.{g}.k", k), (f"init.kv.{g}.v", v)]
    for i, s in enumerate(init.ssm):
        if s is None:
            continue
        out.append((f"init.ssm.{i}.h", s.h))
        if s.conv_tail is not None:
            out.append((f"init.ssm.{i}.conv", s.conv_tail))
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    tensors = list(ckpt.model.state_dict().items())
    if ckpt.init is not None:
        meta["init"] = {"meta_count": ckpt.init.meta_count, "fingerprint": ckpt.init.fingerprint,
                        "ssm_layers": len(ckpt.init.ssm)}
        tensors += _init_tensors(ckpt.init)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for text in (ckpt.model.config.to_text(), json.dumps(meta, sort_keys=True)):
        raw = text.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _DTYPES.index(dt), arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 32 or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    texts = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        texts.append(r.take(n).decode("utf-8"))
    config = ModelConfig.from_text(texts[0])
    meta = json.loads(texts[1])
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code >= len(_DTYPES):
            raise CheckpointError(f"{name}: bad dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    init = None
    info = meta.pop("init", None)
    if info is not None:
        kv = {}
        for name in list(tensors):
            if name.startswith("init.kv.") and name.endswith(".k"):
                g = int(name.split(".")[2])
                kv[g] = (tensors.pop(name), tensors.pop(f"init.kv.{g}.v"))
        ssm = []
        for i in range(info["ssm_layers"]):
            h = tensors.pop(f"init.ssm.{i}.h", None)
            conv = tensors.pop(f"init.ssm.{i}.conv", None)
            ssm.append(None if h is None else SSMState(h, conv))
        init = PrecomputedInit(info["meta_count"], kv, ssm, info["fingerprint"])

    dtype = tensors["embed"].dtype if "embed" in tensors else np.float64
    model = build(config, seed=0, dtype=dtype)
    model.load_state_dict(tensors)
    return Checkpoint(model, meta, init)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
