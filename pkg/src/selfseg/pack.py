"""Flat binary container with a plain-text header.

Layout (all text is UTF-8, lines end in ``\\n``)::

    SELFSEG-PACK <version>
    key = value                      # zero or more header lines
    @array <name> <dtype> <shape> <offset> <nbytes>
    ...
    [data]
    <raw bytes>

``dtype`` is a numpy type string with explicit byte order (``<f8``, ``<i8``,
``|u1``), ``shape`` is a comma separated list (``-`` for a 0-d array) and
``offset`` counts bytes from the first byte after the ``[data]`` line.  Arrays
are stored C-contiguous, little-endian, back to back in table order.  Names and
keys may not contain whitespace; values may not contain newlines.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "SELFSEG-PACK"
VERSION = 1


class PackError(ValueError):
    pass


def _le(dtype: np.dtype) -> np.dtype:
    return dtype.newbyteorder("<") if dtype.byteorder not in ("|", "<") else dtype


def save_pack(path: str | os.PathLike, header: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for key, value in header.items():
        value = str(value)
        if not key or any(ch.isspace() for ch in key) or "\n" in value:
            raise PackError(f"bad header entry {key!r}")
        lines.append(f"{key} = {value}")
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise PackError(f"bad array name {name!r}")
        arr = np.ascontiguousarray(arr)
        dt = _le(arr.dtype)
        raw = arr.astype(dt, copy=False).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"@array {name} {dt.str} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("[data]")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + b"".join(blobs))


def load_pack(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    marker = b"\n[data]\n"
    cut = buf.find(marker)
    if cut < 0:
        raise PackError(f"{path}: missing [data] marker")
    text = buf[:cut].decode().split("\n")
    body = memoryview(buf)[cut + len(marker) :]
    magic = text[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise PackError(f"{path}: not a {MAGIC} file")
    if int(magic[1]) != VERSION:
        raise PackError(f"{path}: unsupported version {magic[1]}")
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in text[1:]:
        if line.startswith("@array "):
            _, name, dt, shape, off, nbytes = line.split(" ")
            shp = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            off, nbytes = int(off), int(nbytes)
            if off + nbytes > len(body):
                raise PackError(f"{path}: array {name} truncated")
            arrays[name] = np.frombuffer(body[off : off + nbytes], dtype=np.dtype(dt)).reshape(shp).copy()
        elif line:
            key, sep, value = line.partition(" = ")
            if not sep:
                raise PackError(f"{path}: malformed header line {line!r}")
            header[key] = value
    return header, arrays
