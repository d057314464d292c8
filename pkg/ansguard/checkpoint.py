"""Versioned binary container for models, detectors and activation sets.

Layout: b"ANSG", u32 format version, u32 header length, UTF-8 JSON header,
then every array's raw little-endian bytes in manifest order.
"""

import json
import struct
from pathlib import Path

import numpy as np

from ansguard.errors import CheckpointError, TruncatedCheckpointError, VersionMismatchError

MAGIC = b"ANSG"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def write_container(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    manifest = []
    payload = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": little.dtype.str, "shape": list(arr.shape)})
        payload.append(little.tobytes())
    header = {**header, "format_version": FORMAT_VERSION, "arrays": manifest}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def _split(raw: bytes, path) -> tuple[dict, int]:
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: {len(raw)} bytes, shorter than the prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an ansguard checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    end = _PREFIX.size + header_len
    if len(raw) < end:
        raise TruncatedCheckpointError(f"{path}: header cut short")
    try:
        header = json.loads(raw[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from err
    return header, end


def read_header(path) -> dict:
    """Parse only the prefix and JSON header."""
    path = Path(path)
    with path.open("rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) == _PREFIX.size:
            prefix += fh.read(_PREFIX.unpack(prefix)[2])
    header, _ = _split(prefix, path)
    return header


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    header, offset = _split(raw, path)
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * dtype.itemsize
        if offset + size > len(raw):
            raise TruncatedCheckpointError(
                f"{path}: payload for {entry['name']} needs {size} bytes, "
                f"{len(raw) - offset} remain"
            )
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return header, arrays
