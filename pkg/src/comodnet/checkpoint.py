"""Self-describing array container used for checkpoints and activation dumps.

Layout: one format-version byte, a 4-byte little-endian length prefix, a
UTF-8 text index with one ``name dtype shape offset`` line per array
(offsets relative to the start of the payload), then the raw little-endian
array payloads. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    lines = []
    payload = b""
    for name, arr in arrays.items():
        if " " in name or "\n" in name:
            raise CheckpointError(f"invalid array name {name!r}")
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        shape = ",".join(str(s) for s in a.shape) or "scalar"
        lines.append(f"{name} {a.dtype.str} {shape} {len(payload)}")
        payload += a.tobytes()
    index = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(bytes([FORMAT_VERSION]))
        f.write(struct.pack("<I", len(index)))
        f.write(index)
        f.write(payload)


def load_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 5:
        raise CheckpointError(f"{path}: truncated container")
    if data[0] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {data[0]}")
    (index_len,) = struct.unpack("<I", data[1:5])
    index = data[5:5 + index_len].decode("utf-8")
    payload = data[5 + index_len:]
    out: dict[str, np.ndarray] = {}
    for line in index.splitlines():
        if not line.strip():
            continue
        name, dtype, shape_s, off_s = line.split(" ")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        off = int(off_s)
        nbytes = count * dt.itemsize
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated for array {name}")
        out[name] = np.frombuffer(payload[off:off + nbytes], dtype=dt).reshape(shape).copy()
    return out
