"""Single-file checkpoints: a text header followed by a little-endian float32 payload.

Header lines::

    IGCN-CHECKPOINT 1
    meta <key> <json value>
    array <name> <d0,d1,...>
    end

Arrays are stored back to back in header order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "IGCN-CHECKPOINT 1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key):
            raise ValueError(f"metadata key {key!r} contains whitespace")
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        lines.append(f"array {name} {','.join(str(d) for d in arr.shape)}")
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    lines.append("end")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            f.write(chunk)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(arrays, meta)``; arrays come back as float32."""
    buf = Path(path).read_bytes()
    meta, specs = {}, []
    pos = 0
    first = True
    while True:
        nl = buf.index(b"\n", pos)
        line = buf[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"{path}: not an IGCN checkpoint")
            first = False
            continue
        if line == "end":
            break
        kind, name, rest = line.split(" ", 2) if line.count(" ") >= 2 else (*line.split(" ", 1), "")
        if kind == "meta":
            meta[name] = json.loads(rest)
        elif kind == "array":
            shape = tuple(int(d) for d in rest.split(",")) if rest else ()
            specs.append((name, shape))
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    arrays = {}
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        arrays[name] = arr.astype(np.float32)
        pos += 4 * count
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes after payload")
    return arrays, meta
