"""Checkpoint files: a short text header followed by raw float64 values.

Layout::

    DTEMCKPT 1
    kind <embedding|vit>
    meta <key> <value>          (any number)
    tensor <name> <dim,dim,...> (one per array, in data order)
    end
    <little-endian float64 values of every tensor, concatenated, row-major>

Header lines are ASCII and newline-terminated. A scalar tensor has an empty
shape field written as ``-``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "DTEMCKPT 1"


def save(path, kind: str, meta: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    lines = [MAGIC, f"kind {kind}"]
    for key, value in meta.items():
        text = str(value)
        if any(c.isspace() for c in text) or not text:
            raise ValueError(f"meta value for {key!r} must be a non-empty token")
        lines.append(f"meta {key} {text}")
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {shape}")
        blobs.append(np.ascontiguousarray(arr).tobytes())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load(path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    kind = ""
    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "kind":
            kind = rest
        elif tag == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif tag == "tensor":
            name, _, shape = rest.partition(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            specs.append((name, dims))
        else:
            raise ValueError(f"{path}: unknown header line {line!r}")
    tensors = {}
    for name, dims in specs:
        count = int(np.prod(dims)) if dims else 1
        end = pos + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated data for {name}")
        tensors[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
        pos = end
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return kind, meta, tensors
