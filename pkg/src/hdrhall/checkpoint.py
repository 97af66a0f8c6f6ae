"""Self-describing binary checkpoint container, magic "DHH1".

Layout: 4-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian bytes of every tensor in header order. The header
carries arbitrary JSON metadata plus a tensor index (name, dtype, shape), so a
file can be rebuilt without knowing the producing code.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"DHH1"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
    "bool": "|b1",
}


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


def save_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write metadata and named tensors atomically (temp file then rename)."""
    index = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        blob = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        blobs.append(blob)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = index
    payload = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(os.fspath(path))) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (metadata, tensors); raises on bad magic/version or truncation."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise VersionMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = f.read(8)
        if len(raw_len) < 8:
            raise CorruptFileError("truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        payload = f.read(header_len)
        if len(payload) < header_len:
            raise CorruptFileError("truncated JSON header")
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFileError("unreadable JSON header") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"format version {version!r} not supported")

        tensors = {}
        for entry in header.pop("tensors", []):
            dtype = np.dtype(_DTYPES[entry["dtype"]])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            blob = f.read(count * dtype.itemsize)
            if len(blob) < count * dtype.itemsize:
                raise CorruptFileError(f"truncated tensor {entry['name']!r}")
            arr = np.frombuffer(blob, dtype).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(entry["dtype"], copy=True)
    return header, tensors
