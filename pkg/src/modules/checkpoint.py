"""Binary checkpoints of one student's parameters.

Layout (little-endian, see doc/FILE_FORMATS.md):

    magic "DMLCKPT1" | version u32 | meta length u32 | meta JSON (utf-8)
    | tensor count u32 | per tensor: name length u16, name, ndim u8,
    dims u32 × ndim, float64 data

The meta record holds the model configuration and training metadata; keys are
sorted and no timestamps are written, so equal parameters give equal bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .model import ModelConfig, ModelParams, parameter_shapes
from .numcore import Tensor
from ..utils.exceptions import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DMLCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointMeta(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model: ModelConfig
    student: int = 0
    model_name: str = ""
    compact: bool = False
    epoch: int = 0
    step: int = 0
    valid_loss: Optional[float] = None
    feature_mean: Optional[list[float]] = None
    feature_std: Optional[list[float]] = None


def encode_checkpoint(params: ModelParams, meta: CheckpointMeta) -> bytes:
    record = json.dumps(meta.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(record)),
        record,
        struct.pack("<I", len(params)),
    ]
    for name, t in params:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(encoded), t.ndim))
        parts.append(encoded)
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path: Path, params: ModelParams, meta: CheckpointMeta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, meta))
    tmp.replace(path)
    logger.debug(f"Saved checkpoint {path}")
    return path


def decode_checkpoint(blob: bytes) -> tuple[ModelParams, CheckpointMeta]:
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, record_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = CheckpointMeta.model_validate(json.loads(take(record_len, "meta").decode("utf-8")))
    except (ValueError, ValidationError) as e:
        raise CheckpointError(f"malformed checkpoint meta: {e}") from e

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3, "tensor header"))
        name = take(name_len, "tensor name").decode("utf-8")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name}"))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * n, f"data of {name}"), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = Tensor(data, requires_grad=True)
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes in checkpoint")

    expected = parameter_shapes(meta.model)
    if list(expected) != list(tensors):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    for name, shape in expected.items():
        if tensors[name].shape != tuple(shape):
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    return ModelParams(meta.model, tensors), meta


def load_checkpoint(path: Path) -> tuple[ModelParams, CheckpointMeta]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
