"""``PRNT`` tensor records and JSON-indexed checkpoints.

Record layout (all little-endian)::

    b"PRNT" | u8 version=1 | u32 N | u32 C | u32 H | u32 W | N*C*H*W float32

Tensors of lower rank are stored with leading unit dims; checkpoints keep
the true shape in their JSON index.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import TensorFileError

MAGIC = b"PRNT"
VERSION = 1
_HEADER = struct.Struct("<4sB4I")
HEADER_SIZE = _HEADER.size  # 21 bytes


def encode(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if a.ndim > 4:
        raise ValueError(f"PRNT records hold at most 4 dims, got shape {a.shape}")
    dims = (1,) * (4 - a.ndim) + tuple(a.shape)
    return _HEADER.pack(MAGIC, VERSION, *dims) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one record at ``offset``; returns (array, offset past the record)."""
    if len(buf) - offset < HEADER_SIZE:
        raise TensorFileError(f"{source}: truncated header at byte offset {offset}")
    magic, version, n, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise TensorFileError(f"{source}: bad magic {magic!r} at byte offset {offset}")
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported version {version} at byte offset {offset + 4}")
    count = n * c * h * w
    start = offset + HEADER_SIZE
    end = start + 4 * count
    if len(buf) < end:
        raise TensorFileError(
            f"{source}: payload truncated at byte offset {len(buf)} (expected {end} bytes for {n}x{c}x{h}x{w})")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(n, c, h, w)
    return arr, end


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def read_tensor(path) -> np.ndarray:
    path = os.fspath(path)
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise TensorFileError(f"{path}: file not found (byte offset 0)") from None
    arr, end = decode(buf, 0, path)
    if end != len(buf):
        raise TensorFileError(f"{path}: {len(buf) - end} trailing byte(s) at byte offset {end}")
    return arr


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, meta: dict | None = None) -> Path:
    """Write ``path`` (JSON index) and a sibling ``.bin`` holding the records."""
    from .params import named_buffers, named_parameters

    path = Path(path)
    bin_path = path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    items = [(n, t.data) for n, t in named_parameters(model)] + list(named_buffers(model))
    for name, arr in items:
        rec = encode(arr)
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(rec)
        offset += len(rec)
    bin_path.write_bytes(b"".join(chunks))
    index = {
        "format": "prnet-checkpoint",
        "version": VERSION,
        "model": model.cfg.to_dict(),
        "data": bin_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Rebuild the model described by a checkpoint index and load its values."""
    from .detector import ArchConfig, build_model
    from .params import named_buffers, named_parameters

    path = Path(path)
    try:
        index = json.loads(path.read_text())
    except FileNotFoundError:
        raise TensorFileError(f"{path}: file not found (byte offset 0)") from None
    except json.JSONDecodeError as e:
        raise TensorFileError(f"{path}: invalid JSON index at byte offset {e.pos}") from None
    if index.get("format") != "prnet-checkpoint":
        raise TensorFileError(f"{path}: not a prnet checkpoint index (byte offset 0)")
    model = build_model(ArchConfig.from_dict(index["model"]))
    bin_path = path.parent / index["data"]
    try:
        buf = bin_path.read_bytes()
    except FileNotFoundError:
        raise TensorFileError(f"{bin_path}: file not found (byte offset 0)") from None
    params = dict(named_parameters(model))
    buffers = dict(named_buffers(model))
    for e in index["tensors"]:
        arr, _ = decode(buf, e["offset"], str(bin_path))
        arr = arr.reshape(e["shape"])
        name = e["name"]
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise TensorFileError(f"{bin_path}: unknown tensor {name!r} at byte offset {e['offset']}")
        if target.shape != arr.shape:
            raise TensorFileError(
                f"{bin_path}: tensor {name!r} has shape {arr.shape}, model expects {target.shape} "
                f"(byte offset {e['offset']})")
        target[...] = arr
    return model, index.get("meta", {})
