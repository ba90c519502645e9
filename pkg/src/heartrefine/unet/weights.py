"""Weight persistence.

A ``.w3u`` file is::

    b"W3U1" | uint64 LE manifest length | manifest JSON (utf-8) | blob

The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``
with offsets relative to the start of the blob, plus the network config.
Tensors are stored little-endian in C order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import UNetConfig, init_weights, param_shapes

__all__ = ["WeightStore", "WeightFileError", "save_weights", "load_weights"]

_MAGIC = b"W3U1"


class WeightFileError(ValueError):
    pass


@dataclass
class WeightStore:
    """Named tensors of one network plus the config they belong to."""

    config: UNetConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialise(cls, config: UNetConfig, seed: int = 0, dtype=np.float32) -> WeightStore:
        return cls(config, init_weights(config, seed, dtype))

    def copy(self) -> WeightStore:
        return WeightStore(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def astype(self, dtype) -> WeightStore:
        return WeightStore(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256(self.config.dumps().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def save_weights(store: WeightStore, path) -> None:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in param_shapes(store.config):
        arr = np.ascontiguousarray(store.params[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "w3u",
        "version": 1,
        "config": store.config.to_json(),
        "meta": store.meta,
        "blob_bytes": offset,
        "entries": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in chunks:
            f.write(raw)
    os.replace(tmp, path)


def load_weights(path, config: UNetConfig | None = None) -> WeightStore:
    """Read a ``.w3u`` file, checking every tensor against the expected layout.

    ``config`` defaults to the one stored in the manifest.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"{path}: cannot read ({exc})") from None
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise WeightFileError(f"{path}: not a .w3u weight file")
    (n_head,) = struct.unpack_from("<Q", raw, 4)
    if 12 + n_head > len(raw):
        raise WeightFileError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12 : 12 + n_head])
    except ValueError as exc:
        raise WeightFileError(f"{path}: corrupt manifest ({exc})") from None
    blob = memoryview(raw)[12 + n_head :]
    if len(blob) != manifest.get("blob_bytes", -1):
        raise WeightFileError(
            f"{path}: blob has {len(blob)} bytes, manifest declares {manifest.get('blob_bytes')}"
            " (truncated or padded file)"
        )
    stored_cfg = UNetConfig.from_json(manifest["config"])
    cfg = config or stored_cfg
    expected = param_shapes(cfg)
    params = {}
    for e in manifest["entries"]:
        name = e["name"]
        if name not in expected:
            raise WeightFileError(f"{path}: unexpected layer {name}")
        shape = tuple(e["shape"])
        if shape != expected[name]:
            raise WeightFileError(f"{path}: layer {name} has shape {shape}, expected {expected[name]}")
        dt = np.dtype(e["dtype"])
        nbytes = int(np.prod(shape)) * dt.itemsize
        if nbytes != e["nbytes"] or e["offset"] + nbytes > len(blob):
            raise WeightFileError(f"{path}: layer {name} byte range inconsistent with its shape")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=e["offset"])
        params[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
    missing = set(expected) - set(params)
    if missing:
        raise WeightFileError(f"{path}: missing layers {sorted(missing)}")
    return WeightStore(cfg, params, manifest.get("meta", {}))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
