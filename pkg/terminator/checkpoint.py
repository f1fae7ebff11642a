"""Binary checkpoint store.

Layout (little-endian): magic `TMNT`, u32 version, u32-length JSON metadata blob,
then per parameter: u32 name length, UTF-8 name, u8 dtype tag, u8 rank, u32
extents, raw payload. Records run up to a closing CRC32 of everything before it.
"""
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from .model import Terminator
from .tensor import Tensor

MAGIC = b"TMNT"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
TAG_BY_DTYPE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(Exception):
    """Raised for unreadable, corrupt or incompatible checkpoints."""


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    step: int = 0
    metrics_digest: str = ""
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Terminator, config: Dict[str, Any], step: int = 0, metrics_digest: str = "") -> "Checkpoint":
        return cls(params=model.state_dict(), config=config, step=step, metrics_digest=metrics_digest)


def _encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config, "step": ckpt.step, "metrics_digest": ckpt.metrics_digest}, sort_keys=True).encode("utf-8")
    parts: List[bytes] = [MAGIC, struct.pack("<II", ckpt.version, len(meta)), meta]
    for name, value in ckpt.params.items():
        arr = np.asarray(value)
        tag = TAG_BY_DTYPE.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<BB{arr.ndim}I", tag, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> str:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(_encode(ckpt))
    tmp.replace(out)
    logging.info("Checkpoint saved to %s (%d tensors, step %d)", out, len(ckpt.params), ckpt.step)
    return str(out)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += struct.calcsize(fmt)
        return values

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise struct.error("record runs past end of data")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk


def _decode(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a TMNT checkpoint")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CheckpointError("checksum mismatch: file is truncated or corrupt")
    reader = _Reader(body, 4)
    try:
        version, meta_len = reader.unpack("<II")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        params: Dict[str, np.ndarray] = {}
        while reader.offset < len(body):
            (name_len,) = reader.unpack("<I")
            name = reader.take(name_len).decode("utf-8")
            tag, rank = reader.unpack("<BB")
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = reader.unpack(f"<{rank}I")
            dtype = DTYPE_TAGS[tag]
            payload = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
            params[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    return Checkpoint(
        params=params,
        config=meta.get("config", {}),
        step=int(meta.get("step", 0)),
        metrics_digest=meta.get("metrics_digest", ""),
        version=version,
    )


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        logging.error("Error reading checkpoint %s: %s", path, e)
        raise CheckpointError(f"cannot read {path}: {e}") from e
    ckpt = _decode(data)
    logging.info("Checkpoint loaded from %s (%d tensors, step %d)", path, len(ckpt.params), ckpt.step)
    return ckpt


def apply_checkpoint(model: Terminator, ckpt: Checkpoint) -> Terminator:
    """Copy checkpoint tensors into `model`, refusing any name or shape disagreement."""
    named = model.named_parameters()
    problems = [f"missing {name}" for name in named if name not in ckpt.params]
    problems += [f"unexpected {name}" for name in ckpt.params if name not in named]
    problems += [
        f"{name}: checkpoint {ckpt.params[name].shape} vs model {param.shape}"
        for name, param in named.items()
        if name in ckpt.params and ckpt.params[name].shape != param.shape
    ]
    if problems:
        raise CheckpointError("checkpoint does not match model: " + "; ".join(problems))
    for name, param in named.items():
        value = ckpt.params[name]
        param.assign(Tensor(value, dtype=value.dtype))
    return model
