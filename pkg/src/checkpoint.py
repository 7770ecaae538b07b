"""
Versioned checkpoint container for named tensors.

Layout (little-endian):
    magic (8 bytes) | format version (uint32) | header length (uint32)
    header JSON (utf-8, sorted keys)
    tensor count (uint32)
    per tensor, sorted by name:
        name length (uint16) | name (utf-8) | ndim (uint32) | dims (uint64 each) | float64 values
"""
import hashlib
import json
import logging
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"FAQCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be read."""


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def encode_checkpoint(tensors: Dict[str, np.ndarray], model_kind: str, config: Dict[str, Any],
                      metadata: Optional[Dict[str, Any]] = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "config_hash": config_hash(config),
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Parse checkpoint bytes.

    Returns:
        (header, tensors by name)

    Raises:
        CheckpointError: on bad magic, unsupported version or truncated data
    """
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    offset = len(MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise CheckpointError("truncated checkpoint")
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    version, header_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * size), dtype="<f8")
        tensors[name] = values.astype(np.float64).reshape(shape)
    if offset != len(payload):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return header, tensors


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], model_kind: str, config: Dict[str, Any],
                    metadata: Optional[Dict[str, Any]] = None) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(tensors, model_kind, config, metadata))
    logger.info(f"Saved {model_kind} checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return decode_checkpoint(payload)
