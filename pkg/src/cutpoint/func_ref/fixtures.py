"""Tensor fixture files: one text header line, then raw little-endian data.

The header reads ``CPTENSOR <dtype> <dim> <dim> ...`` and ends with a
newline, e.g. ``CPTENSOR int8 4 8 8``.
"""

from __future__ import annotations

import numpy as np

from ..errors import CompileError

TAG = "CPTENSOR"
DTYPES = {"int8": "<i1", "int16": "<i2", "int32": "<i4", "int64": "<i8"}


class FixtureError(CompileError, ValueError):
    pass


def dumps_tensor(array, dtype="int8"):
    if dtype not in DTYPES:
        raise FixtureError(f"unsupported fixture dtype {dtype!r}")
    a = np.asarray(array)
    info = np.iinfo(DTYPES[dtype])
    if a.size and (a.min() < info.min or a.max() > info.max):
        raise FixtureError(f"values do not fit {dtype}")
    head = " ".join([TAG, dtype] + [str(d) for d in a.shape]) + "\n"
    return head.encode("ascii") + a.astype(DTYPES[dtype]).tobytes()


def loads_tensor(data):
    nl = data.find(b"\n")
    if nl < 0:
        raise FixtureError("fixture has no header line")
    parts = data[:nl].decode("ascii", "replace").split()
    if len(parts) < 2 or parts[0] != TAG or parts[1] not in DTYPES:
        raise FixtureError(f"bad fixture header {data[:nl]!r}")
    try:
        shape = tuple(int(p) for p in parts[2:])
    except ValueError:
        raise FixtureError(f"bad fixture shape in {data[:nl]!r}") from None
    dt = np.dtype(DTYPES[parts[1]])
    body = data[nl + 1:]
    if len(body) != int(np.prod(shape)) * dt.itemsize:
        raise FixtureError(f"fixture body is {len(body)} bytes, shape {shape} "
                           f"needs {int(np.prod(shape)) * dt.itemsize}")
    return np.frombuffer(body, dtype=dt).astype(np.int64).reshape(shape)


def write_tensor(path, array, dtype="int8"):
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(array, dtype))


def read_tensor(path):
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())
