"""EVT1 dense tensor dump: ``EVT1 <ndim> <d0> ...\\n`` then little-endian f64 row-major."""

from __future__ import annotations

import os
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

MAGIC = "EVT1"


class FormatError(ValueError):
    """A file does not follow its declared binary or text layout."""


def dumps_tensor(array) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    header = " ".join([MAGIC, str(array.ndim)] + [str(d) for d in array.shape]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(array).astype("<f8", copy=False).tobytes()


def loads_tensor(blob: bytes) -> np.ndarray:
    newline = blob.find(b"\n")
    if newline < 0:
        raise FormatError("EVT1: missing header line")
    try:
        fields = blob[:newline].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError(f"EVT1: non-ASCII header at byte {exc.start}") from None
    if not fields or fields[0] != MAGIC:
        raise FormatError(f"EVT1: bad magic {fields[:1]!r}")
    try:
        ndim = int(fields[1])
        shape = tuple(int(d) for d in fields[2:])
    except (IndexError, ValueError):
        raise FormatError(f"EVT1: malformed header {blob[:newline]!r}") from None
    if len(shape) != ndim or any(d < 0 for d in shape):
        raise FormatError(f"EVT1: header declares ndim {ndim} but shape {shape}")
    body = blob[newline + 1 :]
    count = int(np.prod(shape, dtype=np.int64))
    if len(body) != 8 * count:
        raise FormatError(f"EVT1: expected {8 * count} payload bytes after byte {newline + 1}, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path: PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())
