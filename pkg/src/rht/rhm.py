"""RHM1 heatmap container and named-tensor checkpoints built from it.

A single RHM1 record is a 16-byte header (ASCII ``RHM1`` then uint32 LE
H, W, C) followed by H*W*C float64 LE values, row-major, channel-minor.  A
checkpoint is several records back to back plus a JSON manifest mapping each
name to its H, W, C, byte offset and original array shape.
"""

import json
import struct

import numpy as np

MAGIC = b"RHM1"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def encode(data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError(f"RHM1 holds H x W x C grids, got shape {data.shape}")
    H, W, C = data.shape
    return _HEADER.pack(MAGIC, H, W, C) + data.astype("<f8").tobytes()


def decode(buf, offset=0):
    """Parse one record at ``offset``; returns (array, offset just past the record)."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated RHM1 header")
    magic, H, W, C = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    start = offset + _HEADER.size
    end = start + 8 * H * W * C
    if len(buf) < end:
        raise FormatError(f"RHM1 payload truncated: need {end - start} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype="<f8", count=H * W * C, offset=start).astype(np.float64)
    return arr.reshape(H, W, C), end


def write(path, data):
    with open(path, "wb") as f:
        f.write(encode(data))


def read(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after RHM1 record")
    return arr


def _as_grid(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1, 1)
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 3:
        return arr
    return arr.reshape(arr.shape[0], arr.shape[1], -1)


def write_named(path, tensors, manifest_path=None):
    """Write named arrays as consecutive records plus a JSON manifest.

    Arrays of any rank are stored as H x W x C grids (1-D as 1 x N x 1,
    >3-D folding trailing axes into C); the manifest keeps the true shape.
    """
    manifest_path = manifest_path or str(path) + ".json"
    entries = {}
    chunks = []
    offset = 0
    for name in tensors:
        if not name.isascii():
            raise ValueError(f"tensor name {name!r} is not ASCII")
        arr = np.asarray(tensors[name])
        grid = _as_grid(arr)
        rec = encode(grid)
        H, W, C = grid.shape
        entries[name] = {"H": H, "W": W, "C": C, "offset": offset, "shape": list(arr.shape)}
        chunks.append(rec)
        offset += len(rec)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(manifest_path, "w") as f:
        json.dump({"format": "RHM1", "tensors": entries}, f, indent=2)
        f.write("\n")
    return manifest_path


def read_named(path, manifest_path=None):
    manifest_path = manifest_path or str(path) + ".json"
    with open(manifest_path) as f:
        manifest = json.load(f)
    with open(path, "rb") as f:
        buf = f.read()
    out = {}
    for name, e in manifest["tensors"].items():
        arr, _ = decode(buf, e["offset"])
        if arr.shape != (e["H"], e["W"], e["C"]):
            raise FormatError(f"{name}: record shape {arr.shape} disagrees with manifest")
        out[name] = arr.reshape(e["shape"])
    return out
