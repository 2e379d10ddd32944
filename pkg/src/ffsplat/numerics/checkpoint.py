"""Named-tensor checkpoint files.

Layout (documented in docs/file_formats.md):
  line 1: "ffsplat-checkpoint 1"
  line 2: "tensors <count>"
  <count> lines: "<name> <float32|float64> <d0,d1,...>"   (or "-" for 0-d)
  line: "end-header"
  then the raw buffers, C-order little-endian, concatenated in header order.
"""

import sys

import numpy as np

from .tensor import Tensor

_MAGIC = "ffsplat-checkpoint 1"


def _le(arr):
    if sys.byteorder == "big":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return np.ascontiguousarray(arr)


def save_checkpoint(path, tensors):
    """Write a {name: Tensor|ndarray} dict. Order is preserved."""
    entries = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise TypeError(f"{name}: checkpoint holds float32/float64 only, got {arr.dtype}")
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"bad tensor name {name!r}")
        entries.append((name, arr))
    lines = [_MAGIC, f"tensors {len(entries)}"]
    for name, arr in entries:
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
        lines.append(f"{name} {arr.dtype.name} {shape}")
    lines.append("end-header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, arr in entries:
            f.write(_le(arr).tobytes())


def load_checkpoint(path):
    """Read back a checkpoint as {name: ndarray} in file order."""
    with open(path, "rb") as f:
        blob = f.read()
    head_end = blob.find(b"end-header\n")
    if head_end < 0:
        raise ValueError(f"{path}: not a checkpoint file (missing end-header)")
    header = blob[:head_end].decode("ascii").splitlines()
    body = blob[head_end + len(b"end-header\n"):]
    if not header or header[0] != _MAGIC:
        raise ValueError(f"{path}: bad magic line {header[:1]!r}")
    n = int(header[1].split()[1])
    specs = header[2:2 + n]
    if len(specs) != n:
        raise ValueError(f"{path}: header lists {len(specs)} tensors, expected {n}")
    out = {}
    offset = 0
    for line in specs:
        name, dtype_name, shape_s = line.split(" ")
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        dt = np.dtype(dtype_name).newbyteorder("<")
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        out[name] = arr.reshape(shape).astype(np.dtype(dtype_name), copy=True)
        offset += nbytes
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes")
    return out
