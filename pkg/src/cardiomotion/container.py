"""Single-file binary container: one JSON header line plus raw array payloads.

Layout (byte-exact):
  * Line 1: UTF-8 JSON object terminated by a single ``\\n``. Keys:
    ``schema`` (int, currently 1), ``kind`` (str), ``byte_order``
    (always "little"), ``entries`` (list of {"name", "dtype", "shape"}),
    ``crc32`` (zlib CRC-32 of the whole payload), ``meta`` (free-form JSON).
  * Payload: each entry's raw bytes in entry order, C-contiguous,
    little-endian.

Round-trips are bit-exact; a corrupted payload byte fails the checksum.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int32": np.dtype("<i4"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class ContainerError(IOError):
    """Malformed, truncated, or corrupted container file."""


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("="):
            return name
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def write(path, kind: str, entries: dict[str, np.ndarray], meta: dict | None = None) -> None:
    payload = bytearray()
    desc = []
    for name, arr in entries.items():
        dtype_name = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        desc.append({"name": name, "dtype": dtype_name, "shape": list(arr.shape)})
        payload += raw
    header = {
        "schema": SCHEMA_VERSION,
        "kind": kind,
        "byte_order": "little",
        "entries": desc,
        "crc32": zlib.crc32(bytes(payload)),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n" + bytes(payload)
    Path(path).write_bytes(blob)


def read_header(path) -> dict:
    """Parse and validate the header line without loading the payload."""
    with open(path, "rb") as f:
        line = f.readline()
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: not a container file ({e})") from None
    if header.get("schema") != SCHEMA_VERSION:
        raise ContainerError(f"{path}: unsupported schema version {header.get('schema')}")
    if header.get("byte_order") != "little":
        raise ContainerError(f"{path}: unsupported byte order")
    return header


def read(path, expected_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    header = read_header(path)
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ContainerError(f"{path}: kind {header['kind']!r}, expected {expected_kind!r}")
    with open(path, "rb") as f:
        f.readline()
        payload = f.read()
    expected = sum(
        int(np.prod(e["shape"], dtype=np.int64)) * _DTYPES[e["dtype"]].itemsize
        for e in header["entries"]
    )
    if len(payload) != expected:
        raise ContainerError(f"{path}: truncated payload ({len(payload)} bytes, expected {expected})")
    if zlib.crc32(payload) != header["crc32"]:
        raise ContainerError(f"{path}: checksum failure")
    entries: dict[str, np.ndarray] = {}
    offset = 0
    for e in header["entries"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset)
        entries[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
        offset += count * dt.itemsize
    return entries, header["meta"]
