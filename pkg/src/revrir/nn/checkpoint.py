"""Binary checkpoint container.

Layout (little-endian)::

    magic "RVCK" | version u32
    repeated sections:
        tag (4 bytes: PARM, OPTM or META) | record count u32
        PARM/OPTM record: name_len u32 | name utf-8 | rank u32 | dims u64[rank] | data f64[prod(dims)]
        META record:      name_len u32 | name utf-8 | blob_len u32 | utf-8 JSON
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"RVCK"
VERSION = 1
PARAMS = b"PARM"
OPTIMIZER = b"OPTM"
META = b"META"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _write_name(fh: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    fh.write(_U32.pack(len(raw)))
    fh.write(raw)


def _write_arrays(fh: BinaryIO, tag: bytes, arrays: Mapping[str, np.ndarray]) -> None:
    fh.write(tag)
    fh.write(_U32.pack(len(arrays)))
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f8")
        _write_name(fh, name)
        fh.write(_U32.pack(arr.ndim))
        for dim in arr.shape:
            fh.write(_U64.pack(dim))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    optimizer: Mapping[str, np.ndarray] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        _write_arrays(fh, PARAMS, params)
        if optimizer is not None:
            _write_arrays(fh, OPTIMIZER, optimizer)
        if meta is not None:
            fh.write(META)
            fh.write(_U32.pack(len(meta)))
            for key, value in meta.items():
                blob = json.dumps(value, sort_keys=True).encode("utf-8")
                _write_name(fh, key)
                fh.write(_U32.pack(len(blob)))
                fh.write(blob)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("checkpoint truncated")
    return raw


def _read_name(fh: BinaryIO) -> str:
    (n,) = _U32.unpack(_read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(params, optimizer_state, meta)``."""
    sections: dict[bytes, dict] = {PARAMS: {}, OPTIMIZER: {}, META: {}}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        (version,) = _U32.unpack(_read_exact(fh, 4))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        while tag := fh.read(4):
            if tag not in sections:
                raise FormatError(f"{path}: unknown section tag {tag!r}")
            (count,) = _U32.unpack(_read_exact(fh, 4))
            for _ in range(count):
                name = _read_name(fh)
                if tag == META:
                    (n,) = _U32.unpack(_read_exact(fh, 4))
                    sections[META][name] = json.loads(_read_exact(fh, n))
                    continue
                (rank,) = _U32.unpack(_read_exact(fh, 4))
                shape = tuple(_U64.unpack(_read_exact(fh, 8))[0] for _ in range(rank))
                size = int(np.prod(shape, dtype=np.int64))
                data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape)
                sections[tag][name] = data.astype(np.float64)
    return sections[PARAMS], sections[OPTIMIZER], sections[META]


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes; keys embedding caches."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
