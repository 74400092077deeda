"""MDTN binary tensor files.

Layout: ``b"MDTN"``, version byte ``0x01``, dtype byte (1 = f32, 2 = f64),
ndim byte, ``ndim`` little-endian u64 extents, then the row-major
little-endian payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDTN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("not an MDTN buffer (bad magic)")
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported MDTN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 7 + 8 * ndim
    dims = struct.unpack(f"<{ndim}Q", buf[7:off])
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    payload = buf[off:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"payload holds {len(payload)} bytes, dims {dims} need {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_state(directory, state: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write one MDTN file per named tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, arr in state.items():
        save(directory / f"{name}.mdtn", arr)
        manifest.append({"name": name, "dims": list(np.shape(arr))})
    doc = {"tensors": manifest}
    if extra:
        doc.update(extra)
    (directory / "manifest.json").write_text(json.dumps(doc, indent=1))


def load_state(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    state = {}
    for entry in doc["tensors"]:
        arr = load(directory / f"{entry['name']}.mdtn")
        if list(arr.shape) != entry["dims"]:
            raise FormatError(f"{entry['name']}: file dims {arr.shape} != manifest {entry['dims']}")
        state[entry["name"]] = arr
    return state, doc
