"""Dense float32 array files with a small self-describing header.

Layout::

    b"OCTARR" + uint16 version      (8 bytes)
    uint32 header length            (little-endian)
    header                          (UTF-8 JSON: shape, modality, dtype)
    payload                         (row-major, little-endian float32)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OCTARR"
FORMAT_VERSION = 1
DTYPE = "<f4"


class ArrayFormatError(ValueError):
    pass


def write_array(path, data: np.ndarray, modality: str) -> None:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    header = json.dumps(
        {"shape": list(arr.shape), "modality": modality, "dtype": DTYPE},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_header(fh) -> dict:
    magic = fh.read(8)
    if len(magic) != 8 or magic[:6] != MAGIC:
        raise ArrayFormatError("not an octpair array file")
    (version,) = struct.unpack("<H", magic[6:])
    if version != FORMAT_VERSION:
        raise ArrayFormatError(f"unsupported array format version {version}")
    (hlen,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    if header.get("dtype") != DTYPE:
        raise ArrayFormatError(f"unsupported dtype {header.get('dtype')!r}")
    return header


def read_array(path) -> tuple[np.ndarray, str]:
    """Return ``(array, modality)`` from a file written by :func:`write_array`."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = read_header(fh)
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.fromfile(fh, dtype=DTYPE, count=count)
    if data.size != count:
        raise ArrayFormatError(f"{path}: truncated payload")
    return data.reshape(shape).astype(np.float32, copy=False), header["modality"]
