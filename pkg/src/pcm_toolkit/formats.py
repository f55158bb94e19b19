"""File-format plumbing: binary PLY point clouds, pose lists, PNG masks.

PLY dialect: binary little-endian 1.0 with x/y/z stored as 64-bit floats and
an optional uint64 ``id`` property carrying per-point provenance. Additional
per-vertex properties (e.g. source pixel coordinates for predicted
reconstructions) round-trip through the generic reader/writer.

All writers are atomic: bytes are staged to a temporary file in the target
directory and renamed into place, so a failed run never leaves partial output.
"""

from __future__ import annotations

import io
import os
import tempfile
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import PointCloud, RigidTransform

_PLY_TYPES = {
    "double": "<f8",
    "float64": "<f8",
    "float": "<f4",
    "float32": "<f4",
    "uint64": "<u8",
    "uint32": "<u4",
    "uint": "<u4",
    "int32": "<i4",
    "int": "<i4",
    "uint16": "<u2",
    "ushort": "<u2",
    "int16": "<i2",
    "short": "<i2",
    "uint8": "<u1",
    "uchar": "<u1",
    "int8": "<i1",
    "char": "<i1",
}

_NUMPY_TO_PLY = {
    np.dtype("<f8"): "double",
    np.dtype("<f4"): "float",
    np.dtype("<u8"): "uint64",
    np.dtype("<u4"): "uint32",
    np.dtype("<i4"): "int32",
    np.dtype("<u1"): "uchar",
}


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a same-directory temp file + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ply_bytes(columns: dict[str, np.ndarray]) -> bytes:
    """Serialize named per-vertex columns as binary little-endian PLY."""
    if not columns:
        raise ValueError("no columns to write")
    names = list(columns)
    n = len(next(iter(columns.values())))
    fields = []
    for name in names:
        arr = np.ascontiguousarray(columns[name])
        if len(arr) != n:
            raise ValueError("all PLY columns must have the same length")
        dt = arr.dtype.newbyteorder("<")
        if dt not in _NUMPY_TO_PLY:
            raise ValueError(f"unsupported PLY column dtype {arr.dtype}")
        fields.append((name, dt))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_NUMPY_TO_PLY[dt]} {name}" for name, dt in fields]
    header.append("end_header")
    rec = np.empty(n, dtype=fields)
    for name, dt in fields:
        rec[name] = columns[name]
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def read_ply_columns(path) -> dict[str, np.ndarray]:
    """Read a binary little-endian PLY vertex element into named columns."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ValueError(f"not a PLY file: {path}")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n") :]
    n = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise ValueError("only binary little-endian PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError("list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise ValueError(f"unsupported PLY property type {parts[1]}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if n is None or not fields:
        raise ValueError(f"no vertex element in PLY file: {path}")
    dtype = np.dtype([(name, dt) for name, dt in fields])
    if len(body) < n * dtype.itemsize:
        raise ValueError(f"truncated PLY payload: {path}")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    return {name: np.ascontiguousarray(rec[name]) for name, _ in fields}


def write_ply(path, cloud: PointCloud, extra: Optional[dict[str, np.ndarray]] = None) -> None:
    """Write a point cloud (x, y, z doubles, optional uint64 id) to ``path``."""
    columns: dict[str, np.ndarray] = {
        "x": cloud.points[:, 0],
        "y": cloud.points[:, 1],
        "z": cloud.points[:, 2],
    }
    if cloud.ids is not None:
        columns["id"] = cloud.ids
    for name, arr in (extra or {}).items():
        columns[name] = arr
    atomic_write_bytes(path, ply_bytes(columns))


def read_ply(path) -> PointCloud:
    """Read a point cloud written by :func:`write_ply` (extra columns ignored)."""
    cols = read_ply_columns(path)
    for axis in ("x", "y", "z"):
        if axis not in cols:
            raise ValueError(f"PLY file lacks '{axis}' property: {path}")
    pts = np.column_stack(
        [cols["x"].astype(np.float64), cols["y"].astype(np.float64), cols["z"].astype(np.float64)]
    )
    ids = cols.get("id")
    return PointCloud(pts, None if ids is None else ids.astype(np.uint64))


def poses_text(entries: Sequence[tuple[int, RigidTransform]]) -> str:
    """One line per scan: timestamp_ns tx ty tz qw qx qy qz."""
    lines = []
    for timestamp, pose in entries:
        q = pose.quaternion_wxyz()
        t = pose.translation
        lines.append(
            f"{int(timestamp)} "
            f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
            f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}"
        )
    return "\n".join(lines) + "\n"


def write_poses(path, entries: Sequence[tuple[int, RigidTransform]]) -> None:
    atomic_write_bytes(path, poses_text(entries).encode("ascii"))


def read_poses(path) -> list[tuple[int, RigidTransform]]:
    entries = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"malformed pose line: {line!r}")
            timestamp = int(parts[0])
            tx, ty, tz, qw, qx, qy, qz = (float(p) for p in parts[1:])
            pose = RigidTransform.from_quaternion_wxyz((qw, qx, qy, qz), (tx, ty, tz))
            entries.append((timestamp, pose))
    return entries


def mask_png_bytes(raster: np.ndarray) -> bytes:
    """Encode a boolean raster as 8-bit single-channel PNG (0/255)."""
    img = Image.fromarray(np.where(raster, 255, 0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_mask_png(path, raster: np.ndarray) -> None:
    atomic_write_bytes(path, mask_png_bytes(raster))


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr >= 128
