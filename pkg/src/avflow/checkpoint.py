"""UTLK binary container for parameters, optimizer state, and tensor dumps.

Layout:
    bytes 0-3    magic "UTLK"
    bytes 4-7    format version, uint32 little-endian
    bytes 8-15   header length in bytes, uint64 little-endian
    header       UTF-8 JSON: run config, tensor tables (name/shape/offset),
                 trainable flags, optimizer section, rng state, step counter
    payload      raw little-endian float32 tensors, row-major, at the offsets
                 recorded in the header (relative to payload start)

Tensor dumps use the same container without the optimizer/rng sections.
Writes go to a temp file in the target directory and are renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .tensor import ParamStore
from .training import OptimizerState

MAGIC = b"UTLK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _build_table(named_arrays, offset0: int = 0):
    table = []
    chunks = []
    offset = offset0
    for name, arr in named_arrays:
        raw = _tensor_bytes(arr)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return table, chunks, offset


def _write_container(path, header: dict, chunks: list[bytes]) -> None:
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint32(VERSION).tobytes())
            fh.write(np.uint64(len(header_bytes)).tobytes())
            fh.write(header_bytes)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UTLK file")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    if 16 + header_len > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: bad header: {err}") from err
    payload = blob[16 + header_len :]
    return header, payload


def _read_table(table, payload, path):
    out = {}
    for entry in table:
        name = entry["name"]
        shape = tuple(entry["shape"])
        offset = entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} offset out of range")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out[name] = arr.reshape(shape).copy()
    return out


@dataclass
class Checkpoint:
    params: ParamStore
    config: dict | None
    optimizer: OptimizerState | None
    rng: dict | None
    step: int


def save_checkpoint(path, params: ParamStore, config: dict | None = None,
                    optimizer: OptimizerState | None = None,
                    rng: dict | None = None, step: int = 0) -> None:
    named = [(name, tensor.data) for name, tensor in params.items()]
    table, chunks, offset = _build_table(named)
    header = {
        "config": config,
        "step": int(step),
        "tensors": table,
        "trainable": {name: params.is_trainable(name) for name in params.names()},
        "optimizer": None,
        "rng": rng,
    }
    if optimizer is not None:
        opt_named = [(f"m/{n}", a) for n, a in optimizer.m.items()]
        opt_named += [(f"v/{n}", a) for n, a in optimizer.v.items()]
        opt_table, opt_chunks, _ = _build_table(opt_named, offset0=offset)
        header["optimizer"] = {"step": int(optimizer.step), "tensors": opt_table}
        chunks += opt_chunks
    _write_container(path, header, chunks)


def load_checkpoint(path) -> Checkpoint:
    header, payload = _read_container(path)
    tensors = _read_table(header.get("tensors", []), payload, path)
    trainable = header.get("trainable", {})
    params = ParamStore()
    for entry in header.get("tensors", []):
        name = entry["name"]
        params.add(name, tensors[name], trainable=bool(trainable.get(name, True)))
    optimizer = None
    opt_section = header.get("optimizer")
    if opt_section is not None:
        opt_tensors = _read_table(opt_section["tensors"], payload, path)
        optimizer = OptimizerState(step=int(opt_section["step"]))
        for key, arr in opt_tensors.items():
            kind, _, name = key.partition("/")
            if kind == "m":
                optimizer.m[name] = arr
            elif kind == "v":
                optimizer.v[name] = arr
            else:
                raise CheckpointError(f"{path}: unknown optimizer tensor {key}")
    return Checkpoint(
        params=params,
        config=header.get("config"),
        optimizer=optimizer,
        rng=header.get("rng"),
        step=int(header.get("step", 0)),
    )


def save_tensors(path, named_arrays: dict, config: dict | None = None,
                 meta: dict | None = None) -> None:
    """Tensor-dump variant of the container (no optimizer / rng sections)."""
    table, chunks, _ = _build_table(list(named_arrays.items()))
    header = {"config": config, "step": 0, "tensors": table, "meta": meta}
    _write_container(path, header, chunks)


def load_tensors(path):
    header, payload = _read_container(path)
    return _read_table(header.get("tensors", []), payload, path), header
