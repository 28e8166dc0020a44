"""Versioned single-file model container.

Layout (all integers little-endian)::

    8 bytes   magic  b"OFXGRAD\\0"
    8 bytes   total file length (u64)
    4 bytes   header length (u32)
    header    UTF-8 JSON: format version, config, temperature, feature
              constants, notes and the ordered array table
    payload   every array as raw little-endian float64, in table order
    32 bytes  SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ModelFormatError, VersionError
from .grader import GraderConfig, GraderModel
from .imagefeat import FeatureConfig

MAGIC = b"OFXGRAD\0"
FORMAT_VERSION = "1.0"
_PREAMBLE = struct.Struct("<8sQI")
_DIGEST = 32


def _pack(header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    total = _PREAMBLE.size + len(head) + len(payload) + _DIGEST
    body = _PREAMBLE.pack(MAGIC, total, len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def model_bytes(model: GraderModel, format_version: str = FORMAT_VERSION) -> bytes:
    names = list(model.params) + list(model.buffers)
    arrays = [model.params[n] for n in model.params] + [model.buffers[n] for n in model.buffers]
    header = {
        "format_version": format_version,
        "config": model.config.to_dict(),
        "temperature": float(model.temperature),
        "features": model.features.to_dict(),
        "notes": model.notes,
        "arrays": [{"name": n, "shape": list(a.shape), "buffer": n in model.buffers}
                   for n, a in zip(names, arrays)],
    }
    return _pack(header, arrays)


def save_model(model: GraderModel, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def model_from_bytes(data: bytes, source: str = "<bytes>") -> GraderModel:
    if len(data) < _PREAMBLE.size + _DIGEST:
        raise ModelFormatError(f"{source}: truncated model file ({len(data)} bytes)")
    magic, total, head_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{source}: not a grader model file")
    if total != len(data):
        raise ModelFormatError(f"{source}: truncated model file ({len(data)} of {total} bytes)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch, file is corrupted")
    try:
        header = json.loads(body[_PREAMBLE.size:_PREAMBLE.size + head_len])
    except ValueError as exc:
        raise ModelFormatError(f"{source}: unreadable header: {exc}") from exc
    version = str(header.get("format_version", "0"))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise VersionError(f"{source}: format version {version} is not supported (reader is {FORMAT_VERSION})")

    offset = _PREAMBLE.size + head_len
    params, buffers = {}, {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * n
        if end > len(body):
            raise ModelFormatError(f"{source}: array {entry['name']} runs past the payload")
        arr = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        (buffers if entry.get("buffer") else params)[entry["name"]] = arr
        offset = end
    if offset != len(body):
        raise ModelFormatError(f"{source}: {len(body) - offset} trailing payload bytes")
    return GraderModel(
        config=GraderConfig.from_dict(header["config"]),
        params=params,
        buffers=buffers,
        temperature=float(header["temperature"]),
        features=FeatureConfig.from_dict(header["features"]),
        notes=header.get("notes", {}),
    )


def load_model(path) -> GraderModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    return model_from_bytes(data, str(path))
