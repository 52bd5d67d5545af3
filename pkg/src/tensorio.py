from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .errors import DataError
from .reporting import write_bytes_atomic
from .tensornet import ParameterStore, UNetConfig, count_parameters


MAGIC = b"CSEG"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")
MOMENT_ROLES = ("adam_m", "adam_v")

# Container layout:
#   MAGIC | uint32 LE header length | UTF-8 JSON header | float32 LE payload
# Header tensor offsets are relative to the start of the payload.


def encode_tensors(
    tensors: Dict[str, np.ndarray],
    config: Optional[Dict[str, Any]] = None,
    roles: Optional[Dict[str, str]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
        entry = {"name": name, "shape": [int(s) for s in np.shape(arr)], "offset": offset, "nbytes": len(raw)}
        if roles and name in roles:
            entry["role"] = roles[name]
        index.append(entry)
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "config": config,
        "meta": meta or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def decode_tensors(data: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise DataError(f"{source}: not a tensor container (bad magic)")
    (head_len,) = struct.unpack("<I", data[4:8])
    if 8 + head_len > len(data):
        raise DataError(f"{source}: truncated header")
    try:
        header = json.loads(data[8:8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: corrupt header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported container version {header.get('format_version')}")

    payload = memoryview(data)[8 + head_len:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        expected = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if nbytes != expected or start + nbytes > len(payload):
            raise DataError(f"{source}: tensor {entry['name']!r} has an inconsistent size")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=PAYLOAD_DTYPE).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return tensors, header


def save_tensors(path: str | Path, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    return write_bytes_atomic(encode_tensors(tensors, meta=meta), path)


def load_tensors(path: str | Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Tensor file not found: {path}")
    return decode_tensors(path.read_bytes(), source=str(path))


def load_array(path: str | Path, name: Optional[str] = None) -> np.ndarray:
    """One tensor from a container; `name` may be omitted when it holds exactly one."""
    tensors, _ = load_tensors(path)
    if name is None:
        if len(tensors) != 1:
            raise DataError(f"{path}: holds {len(tensors)} tensors, name one of {sorted(tensors)}")
        return next(iter(tensors.values()))
    if name not in tensors:
        raise DataError(f"{path}: no tensor named {name!r}")
    return tensors[name]


def save_checkpoint(path: str | Path, store: ParameterStore, meta: Optional[Dict[str, Any]] = None) -> Path:
    """Parameters, batch-norm buffers and the Adam moments, so training can resume exactly."""
    tensors: Dict[str, np.ndarray] = {}
    roles: Dict[str, str] = {}
    for name, p in store.params.items():
        tensors[name] = p
        roles[name] = "param"
    for name, b in store.buffers.items():
        tensors[name] = b
        roles[name] = "buffer"
    for role in MOMENT_ROLES:
        for name, m in getattr(store, role).items():
            tensors[f"{role}/{name}"] = m
            roles[f"{role}/{name}"] = role
    data = encode_tensors(tensors, config=store.cfg.to_dict(), roles=roles, meta={"adam_step": store.step, **(meta or {})})
    return write_bytes_atomic(data, path)


def load_checkpoint(path: str | Path) -> Tuple[ParameterStore, Dict[str, Any]]:
    tensors, header = load_tensors(path)
    if not header.get("config"):
        raise DataError(f"{path}: container has no network config; not a checkpoint")
    try:
        cfg = UNetConfig.from_dict(header["config"])
    except TypeError as e:
        raise DataError(f"{path}: unrecognized network config ({e})") from e

    store = ParameterStore(cfg, np.float32)
    moments = []
    for entry in header["tensors"]:
        name, role = entry["name"], entry.get("role")
        if role == "buffer":
            store.add_buffer(name, tensors[name])
        elif role in MOMENT_ROLES:
            moments.append((role, name.split("/", 1)[1], tensors[name]))
        else:
            store.add(name, tensors[name])
    if store.trainable_count() != count_parameters(cfg):
        raise DataError(
            f"{path}: holds {store.trainable_count()} trainable scalars, config implies {count_parameters(cfg)}"
        )
    for role, name, value in moments:
        target = getattr(store, role)
        if name not in target or target[name].shape != value.shape:
            raise DataError(f"{path}: {role} entry {name!r} does not match any parameter")
        target[name][...] = value

    # Without both moments the bias correction of a later step would be wrong; restart the count.
    restored = {role for role, _, _ in moments}
    store.step = int(header.get("meta", {}).get("adam_step", 0)) if restored == set(MOMENT_ROLES) else 0
    return store, header.get("meta", {})
