"""
Versioned binary checkpoints.

Layout (little-endian)::

    b"BWDA" | u32 version | 64 ascii bytes config digest
    u32 metadata length | metadata JSON (utf-8, sorted keys)
    u32 blob count | per blob: u16 name length, name, u8 ndim, ndim x u32 dims, f32 values

Blobs are written in the order given, which for modules is
registration order, so identical states give identical files.
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from ..errors import ConfigMismatchError
from .module import Module, format_summary

logger = logging.getLogger(__name__)

MAGIC = b"BWDA"
VERSION = 1


@dataclass
class Checkpoint:
    digest: str
    meta: Dict[str, Any] = field(default_factory=dict)
    blobs: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Blobs under ``prefix/`` with the prefix stripped."""
        head = prefix.rstrip("/") + "/"
        return OrderedDict((k[len(head):], v) for k, v in self.blobs.items() if k.startswith(head))

    def restore(self, module: Module, prefix: str, digest: str = None) -> None:
        if digest is not None and digest != self.digest:
            raise ConfigMismatchError(
                f"checkpoint digest {self.digest[:12]} does not match config digest {digest[:12]}"
            )
        module.load_state_dict(self.section(prefix))


def module_blobs(module: Module, prefix: str) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((f"{prefix}/{k}", v) for k, v in module.state_dict().items())


def save_checkpoint(path: Union[str, Path], digest: str, blobs: Dict[str, np.ndarray],
                    meta: Dict[str, Any] = None) -> None:
    path = Path(path)
    if len(digest) != 64:
        raise ValueError(f"digest must be 64 hex characters, got {len(digest)}")
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), digest.encode("ascii"),
             struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blobs))]
    for name, value in blobs.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    tmp.replace(path)
    logger.debug("saved checkpoint %s (%d blobs)", path, len(blobs))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = reader.take(64).decode("ascii")
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32)
        blobs[name] = values.reshape(shape)
    return Checkpoint(digest=digest, meta=meta, blobs=blobs)


def write_model_summary(path: Union[str, Path], nets: Dict[str, Module]) -> None:
    """model_summary.txt: one layer table per network plus parameter counts."""
    text = "\n".join(format_summary(net, title=f"[{name}]") for name, net in nets.items())
    Path(path).write_text(text, encoding="utf-8")
