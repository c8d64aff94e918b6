"""Binary checkpoint format.

Layout::

    b"SPFCKPT1"                      8-byte magic
    uint32 little-endian             header length in bytes
    UTF-8 JSON header                {"config": {...}, "tensors": [...]}
    payload                          raw little-endian row-major float32 data

Each manifest entry is ``{"name", "shape", "dtype": "f32", "offset"}`` with
``offset`` counted from the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .model import Model, weight_shapes

MAGIC = b"SPFCKPT1"
_LEN = struct.Struct("<I")


def save_checkpoint(model: Model, path) -> None:
    manifest = []
    offset = 0
    for name, shape in weight_shapes(model.config):
        manifest.append({"name": name, "shape": list(shape), "dtype": "f32", "offset": offset})
        offset += int(np.prod(shape)) * 4
    header = json.dumps(
        {"config": model.config.to_dict(), "tensors": manifest}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(header)))
        f.write(header)
        for name, _ in weight_shapes(model.config):
            f.write(np.ascontiguousarray(model.weights[name], dtype="<f4").tobytes())


def _parse_header(blob: bytes):
    if len(blob) < len(MAGIC) + _LEN.size or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("malformed header: bad magic")
    (hlen,) = _LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + hlen > len(blob):
        raise CheckpointError("truncated: header extends past end of file")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        tensors = header["tensors"]
        if not isinstance(tensors, list):
            raise TypeError("tensors must be a list")
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    return config, tensors, start + hlen


def load_checkpoint(path) -> Model:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        blob = f.read()
    config, manifest, payload_start = _parse_header(blob)
    payload = memoryview(blob)[payload_start:]

    entries = {}
    for entry in manifest:
        try:
            entries[entry["name"]] = entry
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed header: bad manifest entry {entry!r}") from exc

    weights = {}
    for name, shape in weight_shapes(config):
        entry = entries.get(name)
        if entry is None:
            raise CheckpointError(f"malformed header: tensor {name!r} missing from manifest")
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"malformed header: {name} has dtype {entry.get('dtype')!r}")
        declared = tuple(entry.get("shape", ()))
        if declared != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: header config implies {shape}, manifest says {declared}"
            )
        offset = int(entry.get("offset", -1))
        nbytes = int(np.prod(shape)) * 4
        if offset < 0:
            raise CheckpointError(f"malformed header: {name} has invalid offset")
        if offset + nbytes > len(payload):
            raise CheckpointError(
                f"truncated: {name} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        weights[name] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape)
    unexpected = entries.keys() - weights.keys()
    if unexpected:
        raise CheckpointError(f"malformed header: unexpected tensors {sorted(unexpected)}")
    try:
        return Model(config, weights)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from exc
