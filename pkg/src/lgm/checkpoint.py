"""Single-file checkpoint: graph spec, config, history and float64 tensors.

Layout::

    b"LGMCKPT\\n"            8-byte magic
    version                 uint32 little-endian
    header length           uint64 little-endian
    header                  UTF-8 JSON (sorted keys)
    payloads                little-endian float64, in header order

The header lists each tensor as ``{"name", "shape", "offset"}`` with byte
offsets relative to the start of the payload block.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import LgmGraph, Parameters, build_graph, zero_parameters

MAGIC = b"LGMCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    graph: LgmGraph
    params: Parameters
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = ckpt.params.to_arrays()
    index, offset = [], 0
    for name in sorted(arrays):
        a = arrays[name]
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {"graph": ckpt.graph.to_spec(), "config": _jsonable(ckpt.config),
              "history": _jsonable(ckpt.history), "extra": _jsonable(ckpt.extra),
              "tensors": index}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob]
    parts += [np.ascontiguousarray(arrays[e["name"]], dtype="<f8").tobytes() for e in index]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad header magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, = struct.unpack("<I", raw[pos:pos + 4])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version} "
                                     f"(expected {VERSION})")
    n, = struct.unpack("<Q", raw[pos + 4:pos + 12])
    pos += 12
    try:
        header = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    payload = raw[pos + n:]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=count,
                                          offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
    graph = build_graph(header["graph"])
    expected = list(zero_parameters(graph).to_arrays())
    if sorted(expected) != sorted(arrays):
        raise CheckpointError(f"{path}: tensors do not match the stored graph")
    # restore the graph's canonical parameter order
    params = Parameters.from_arrays({name: arrays[name] for name in expected})
    return Checkpoint(graph, params, header["config"],
                      header["history"], header.get("extra", {}))
