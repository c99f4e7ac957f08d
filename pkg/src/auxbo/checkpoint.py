"""Versioned binary checkpoint container shared by all trained surrogates.

Layout: magic string, u32 format version, u64 header length, UTF-8 JSON
header (kind tag, config, normalization statistics, parameter manifest),
then the raw little-endian float64 parameter buffers in manifest order.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"AUXBO-MODEL"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    """Missing magic string or undecodable header."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before all declared parameter bytes were read."""


class CheckpointConfigError(CheckpointError):
    """The checkpoint's kind or configuration conflicts with the requested use."""


def save_checkpoint(path: str, kind: str, config: dict, extra: dict,
                    params: dict[str, np.ndarray]) -> None:
    names = sorted(params)
    header = {
        "kind": kind,
        "config": config,
        "extra": extra,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path: str, expect_kind: str | None = None):
    """Returns (kind, config, extra, params). Raises subclasses of CheckpointError."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a model checkpoint (bad magic)")
    off = len(MAGIC)
    if len(data) < off + 12:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) < off + hlen:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: header is not valid JSON ({e})") from e
    off += hlen
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointConfigError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if len(data) < off + nbytes:
            raise CheckpointTruncatedError(f"{path}: parameter {entry['name']!r} cut short")
        arr = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        off += nbytes
    return kind, header["config"], header.get("extra", {}), params
