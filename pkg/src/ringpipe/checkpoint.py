"""Versioned binary container of named arrays plus a JSON sidecar.

Layout: magic, format version, entry count, then per entry a name, a
dtype tag, the shape, and raw little-endian data.  float64 carries the
weights/moments, int64 the token slots, uint64 the dropout stream seeds.
The sidecar (written next to the container as <path>.json) holds the run
config and scalar state, so a checkpoint is self-describing.
"""

import json
import struct

import numpy as np

MAGIC = b"RPCK"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8", 2: "<u8"}
_TAGS = {np.dtype(np.float64): 0, np.dtype(np.int64): 1, np.dtype(np.uint64): 2}


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.astype(_DTYPES[_TAGS[arr.dtype]], copy=False).tobytes())


def load_arrays(path):
    arrays = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint container")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * n)
            if len(data) != 8 * n:
                raise CheckpointError(f"truncated entry {name!r}")
            arrays[name] = np.frombuffer(data, dtype=_DTYPES[tag]).reshape(shape).copy()
    return arrays


def save_sidecar(path, payload):
    with open(str(path) + ".json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_sidecar(path):
    with open(str(path) + ".json") as fh:
        return json.load(fh)
