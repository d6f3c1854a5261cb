"""Binary little-endian PLY in the 3DGS property layout."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .model import NUM_PARAMS, GaussianCloud

PROPERTY_NAMES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
VERTEX_DTYPE = np.dtype([(name, "<f4") for name in PROPERTY_NAMES])
VERTEX_BYTES = VERTEX_DTYPE.itemsize  # 248

# column in the cloud block for each PLY property (normals are dropped)
_COLUMN_OF = {
    **{c: i for i, c in enumerate("xyz")},
    **{f"scale_{i}": 3 + i for i in range(3)},
    **{f"rot_{i}": 6 + i for i in range(4)},
    "opacity": 10,
    **{f"f_dc_{i}": 11 + i for i in range(3)},
    **{f"f_rest_{i}": 14 + i for i in range(45)},
}


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    """Header is not a binary little-endian PLY 1.0 header."""


class PlyLayoutError(PlyError):
    """Vertex properties differ from the 3DGS layout."""


class PlyTruncatedError(PlyError):
    """Payload shorter than the declared vertex count."""


@dataclass
class PlyHeaderInfo:
    vertex_count: int
    property_names: list[str]
    encoding: str = "binary_little_endian"


def _read_header(stream: BinaryIO) -> PlyHeaderInfo:
    first = stream.readline()
    if first.strip() != b"ply":
        raise PlyHeaderError("missing 'ply' magic line")
    vertex_count = None
    names: list[str] = []
    encoding = None
    in_vertex = False
    while True:
        line = stream.readline()
        if not line:
            raise PlyHeaderError("header not terminated by end_header")
        try:
            tokens = line.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise PlyHeaderError("non-ascii header line") from exc
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if tokens[1:] != ["binary_little_endian", "1.0"]:
                raise PlyHeaderError(f"unsupported format {' '.join(tokens[1:])}")
            encoding = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise PlyHeaderError(f"bad element line: {line!r}")
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                vertex_count = int(tokens[2])
            elif int(tokens[2]) != 0:
                raise PlyLayoutError(f"unexpected element {tokens[1]}")
        elif key == "property":
            if not in_vertex:
                raise PlyLayoutError("property outside vertex element")
            if len(tokens) != 3 or tokens[1] != "float":
                raise PlyLayoutError(f"unsupported property: {line.decode().strip()}")
            names.append(tokens[2])
        else:
            raise PlyHeaderError(f"unknown header keyword {key!r}")
    if encoding is None:
        raise PlyHeaderError("missing format line")
    if vertex_count is None or vertex_count < 0:
        raise PlyHeaderError("missing vertex element")
    return PlyHeaderInfo(vertex_count, names, encoding)


def read_ply(stream: BinaryIO | bytes) -> GaussianCloud:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(stream)
    header = _read_header(stream)
    if header.property_names != PROPERTY_NAMES:
        missing = set(PROPERTY_NAMES) - set(header.property_names)
        extra = set(header.property_names) - set(PROPERTY_NAMES)
        raise PlyLayoutError(f"property layout mismatch (missing={sorted(missing)[:4]}, extra={sorted(extra)[:4]})")
    n = header.vertex_count
    payload = stream.read(n * VERTEX_BYTES)
    if len(payload) < n * VERTEX_BYTES:
        raise PlyTruncatedError(f"expected {n * VERTEX_BYTES} payload bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype="<u4").reshape(n, len(PROPERTY_NAMES))
    # bit-level copy keeps -0.0 and subnormals intact
    columns = np.empty((NUM_PARAMS, n), dtype=np.uint32)
    for j, name in enumerate(PROPERTY_NAMES):
        col = _COLUMN_OF.get(name)
        if col is not None:
            columns[col] = raw[:, j]
    return GaussianCloud(columns.view(np.float32))


def write_ply(cloud: GaussianCloud, stream: BinaryIO | None = None) -> bytes | None:
    """Serialize ``cloud``. Returns the bytes when no stream is given."""
    n = cloud.count
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PROPERTY_NAMES]
    header.append("end_header")
    raw = np.zeros((n, len(PROPERTY_NAMES)), dtype="<u4")
    bits = cloud.columns.view(np.uint32)
    for j, name in enumerate(PROPERTY_NAMES):
        col = _COLUMN_OF.get(name)
        if col is not None:
            raw[:, j] = bits[col]
    data = ("\n".join(header) + "\n").encode("ascii") + raw.tobytes()
    if stream is None:
        return data
    stream.write(data)
    return None


def load_ply(path: str | os.PathLike) -> GaussianCloud:
    with open(path, "rb") as fh:
        return read_ply(fh)


def save_ply(cloud: GaussianCloud, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        write_ply(cloud, fh)
