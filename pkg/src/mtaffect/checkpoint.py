"""Self-describing, byte-stable weight checkpoints.

Layout: magic line, little-endian uint64 header length, canonical JSON
header (format version, model config, ordered tensor table, optional
extra metadata), then the raw little-endian tensor bytes in table order.
Two saves of identical weights produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, MultiTaskPyramidNet, build_model

MAGIC = b"MTAFFECT-CKPT\n"
FORMAT_VERSION = 1


def _tensor_table(model: MultiTaskPyramidNet) -> list[tuple[str, str, torch.Tensor]]:
    return [
        (name, kind, tensor)
        for kind, pairs in (
            ("param", model.named_parameters()),
            ("buffer", model.named_buffers()),
        )
        for name, tensor in pairs
    ]


def _model_precision(model: MultiTaskPyramidNet) -> str:
    return "double" if model.dtype == torch.float64 else "single"


def save_checkpoint(model: MultiTaskPyramidNet, path, extra: dict | None = None) -> str:
    """Write the model's weights and config; returns the file's sha256 digest."""
    entries = []
    blobs = []
    for name, kind, tensor in _tensor_table(model):
        arr = tensor.detach().cpu().numpy()
        # ascontiguousarray promotes 0-dim arrays, so record the true shape first
        shape = list(tensor.shape)
        arr = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "kind": kind, "shape": shape, "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    header = {
        "format": "mtaffect-checkpoint",
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "precision": _model_precision(model),
        "entries": entries,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = MAGIC + struct.pack("<Q", len(payload)) + payload + b"".join(blobs)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(MAGIC)
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format") != "mtaffect-checkpoint":
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')!r} "
            f"(expected {FORMAT_VERSION})"
        )
    header["_blob_offset"] = offset + header_len
    header["_data"] = data
    return header


def _copy_tensors(model: MultiTaskPyramidNet, header: dict, path) -> None:
    table = {name: tensor for name, _, tensor in _tensor_table(model)}
    data = header["_data"]
    offset = header["_blob_offset"]
    seen = set()
    for entry in header["entries"]:
        name = entry["name"]
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        raw = data[offset : offset + nbytes]
        offset += nbytes
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
        if name not in table:
            raise CheckpointError(f"{path}: tensor {name!r} not present in model")
        target = table[name]
        if tuple(target.shape) != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, model expects {tuple(target.shape)}"
            )
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr))
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensors {sorted(missing)}")


def load_checkpoint(path) -> tuple[MultiTaskPyramidNet, ModelConfig, dict]:
    """Rebuild the model from the embedded config and restore every tensor.

    Returns (model, config, extra-metadata).
    """
    header = read_checkpoint_header(path)
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, precision=header["precision"])
    _copy_tensors(model, header, path)
    model.eval()
    return model, config, header.get("extra", {})


def load_checkpoint_into(model: MultiTaskPyramidNet, path) -> dict:
    """Restore weights into an existing model; its config must match exactly."""
    header = read_checkpoint_header(path)
    stored = header["config"]
    current = model.config.to_dict()
    # the init seed does not affect architecture; weights are being replaced anyway
    diffs = [
        f"{key}: checkpoint={stored.get(key)!r} model={current.get(key)!r}"
        for key in sorted(set(stored) | set(current))
        if key != "seed" and stored.get(key) != current.get(key)
    ]
    if diffs:
        raise CheckpointError(f"{path}: config mismatch ({'; '.join(diffs)})")
    if header["precision"] != _model_precision(model):
        raise CheckpointError(
            f"{path}: precision mismatch (checkpoint {header['precision']}, "
            f"model {_model_precision(model)})"
        )
    _copy_tensors(model, header, path)
    return header.get("extra", {})


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
