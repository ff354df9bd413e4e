"""Checkpoint container.

Layout (all little-endian)::

    b"MMCK" | u32 format_version | u32 header_len | header (UTF-8 JSON) | payload

The JSON header holds the network config, free-form metadata and, for every
parameter, its name, shape and byte offset into the float32 payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatchError, VolumeIOError
from .network import CorrSegNet, NetworkConfig

MAGIC = b"MMCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(model: CorrSegNet, metadata: dict | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "network_config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(path, model: CorrSegNet, metadata: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, metadata))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointMismatchError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointMismatchError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointMismatchError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    base = _PREFIX.size + hlen
    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * n > len(blob):
            raise CheckpointMismatchError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=n,
                                              offset=start).reshape(entry["shape"])
    return header, arrays


def load_checkpoint(path, expect: NetworkConfig | None = None) -> tuple[CorrSegNet, dict]:
    """Rebuild the model stored at ``path``; returns (model, header)."""
    header, arrays = read_checkpoint(path)
    config = NetworkConfig.from_dict(header["network_config"])
    if expect is not None:
        mine, theirs = expect.to_dict(), config.to_dict()
        # the input shape is not part of the architecture
        mine.pop("input_shape"), theirs.pop("input_shape")
        mine.pop("lambda_corr"), theirs.pop("lambda_corr")
        if mine != theirs:
            raise CheckpointMismatchError(f"checkpoint config {theirs} != expected {mine}")
    model = CorrSegNet(config)
    state = model.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        raise CheckpointMismatchError(f"parameter names differ: missing {missing[:3]}, extra {extra[:3]}")
    for name, t in state.items():
        if tuple(t.shape) != arrays[name].shape:
            raise CheckpointMismatchError(
                f"{name}: checkpoint shape {arrays[name].shape} != model {tuple(t.shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model, header
