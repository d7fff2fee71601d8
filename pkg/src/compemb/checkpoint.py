"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    [8 bytes]  u64 N, length of the header in bytes
    [N bytes]  UTF-8 JSON object, keys sorted, no whitespace:
               {"__metadata__": {...},
                "<name>": {"dtype": "F32"|"F64", "shape": [...], "offsets": [start, end]}, ...}
    [rest]     raw little-endian tensor bytes, concatenated in sorted-name order;
               offsets are relative to the first byte after the header
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params, init_params
from .tensor import Tensor

DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "F32", np.dtype("float64"): "F64"}


class CheckpointError(ValueError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class UnknownTensor(CheckpointError):
    pass


def to_bytes(params: Params, metadata: dict | None = None) -> bytes:
    header: dict = {"__metadata__": metadata or {}}
    blobs, offset = [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(DTYPES[code], copy=False).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "offsets": [offset, offset + len(raw)]}
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(blobs)


def from_bytes(buf: bytes) -> tuple[Params, dict]:
    if len(buf) < 8:
        raise CheckpointError("truncated file: missing header length")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > len(buf) - 8:
        raise CheckpointError(f"header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unparseable header: {e}") from None
    if not isinstance(header, dict):
        raise CheckpointError("header is not a JSON object")
    meta = header.pop("__metadata__", {})
    body = memoryview(buf)[8 + n :]
    params: Params = {}
    for name, info in header.items():
        try:
            dt = DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            start, end = (int(o) for o in info["offsets"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"malformed header entry for {name!r}") from None
        if end > len(body) or end - start != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"truncated or inconsistent data for {name!r}")
        arr = np.frombuffer(body[start:end], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = Tensor(arr, dtype=arr.dtype, name=name)
    return params, meta


def save_checkpoint(params: Params, path, config: ModelConfig | None = None, extra: dict | None = None):
    meta = dict(extra or {})
    if config is not None:
        meta["model_config"] = config.to_dict()
    Path(path).write_bytes(to_bytes(params, meta))


def check_against(params: Params, config: ModelConfig):
    """Raise if the tensors do not fit ``config``'s parameter shapes."""
    expected = init_params(config, lora=any(k.endswith(".lora_a") for k in params))
    for name, t in params.items():
        if name not in expected:
            raise UnknownTensor(f"unknown tensor {name!r} for this model config")
        if t.shape != expected[name].shape:
            raise ShapeMismatch(f"tensor {name!r} has shape {t.shape}, config expects {expected[name].shape}")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing[:5]}")


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[Params, dict]:
    params, meta = from_bytes(Path(path).read_bytes())
    if config is not None:
        check_against(params, config)
    return params, meta
