"""Checkpoint container: named tensors + JSON metadata + integrity digest.

File layout::

    b"NGDCKPT\\x00"            8-byte magic
    <u64 little-endian>        header length in bytes
    header                     UTF-8 JSON (schema version, kind, metadata, tensor table, tree)
    payload                    raw little-endian tensor bytes, back to back
    sha256                     32-byte digest of everything above

Any nested structure of dicts/lists/scalars/tensors can be stored; tensors in
the tree are replaced by ``{"__tensor__": name}`` references into the table.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

MAGIC = b"NGDCKPT\x00"
SCHEMA_VERSION = 1
_DIGEST_BYTES = 32

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NP_DTYPES = {name: np.dtype(name).newbyteorder("<") for name in _DTYPES.values()}


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


class SchemaVersionError(CheckpointError):
    pass


def _flatten(obj: Any, prefix: str, tensors: Dict[str, torch.Tensor]) -> Any:
    if isinstance(obj, torch.Tensor):
        name = prefix or "tensor"
        while name in tensors:
            name += "_"
        tensors[name] = obj
        return {"__tensor__": name}
    if isinstance(obj, dict):
        for k in obj:
            if not isinstance(k, (str, int)):
                raise TypeError(f"unsupported key type {type(k)}")
        return {"__dict__": [[k, _flatten(v, f"{prefix}.{k}" if prefix else str(k), tensors)]
                             for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_flatten(v, f"{prefix}.{i}", tensors) for i, v in enumerate(obj)]
    if isinstance(obj, (bool, int, float, str)) or obj is None:
        return obj
    raise TypeError(f"cannot store object of type {type(obj)} in a checkpoint")


def _unflatten(obj: Any, tensors: Dict[str, torch.Tensor]) -> Any:
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        return {k: _unflatten(v, tensors) for k, v in obj["__dict__"]}
    if isinstance(obj, list):
        return [_unflatten(v, tensors) for v in obj]
    return obj


def save_container(path, tree: Any, kind: str, metadata: dict | None = None) -> None:
    tensors: Dict[str, torch.Tensor] = {}
    flat_tree = _flatten(tree, "", tensors)
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
        arr = t.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[_DTYPES[t.dtype]], copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"schema_version": SCHEMA_VERSION, "kind": kind, "metadata": metadata or {},
              "tensors": table, "tree": flat_tree}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)
    digest = hashlib.sha256(body).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    os.replace(tmp, path)


def load_container(path) -> Tuple[str, Any, dict]:
    """Read and verify a container; returns ``(kind, tree, metadata)``.

    Nothing is constructed until magic, digest and schema version all check out.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + _DIGEST_BYTES or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-_DIGEST_BYTES], data[-_DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    (header_len,) = struct.unpack("<Q", body[8:16])
    try:
        header = json.loads(body[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    payload = body[16 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header["kind"], _unflatten(header["tree"], tensors), header["metadata"]
