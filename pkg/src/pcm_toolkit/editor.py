"""Trackable scene edits: voxel deletion, patch insertion, portable archives.

Edits never mutate a scene; each operation produces an :class:`EditDelta`
recording removed voxel keys and patch insertions (patch id + placement +
the exact keys the placed patch voxelizes to). A delta binds to its base
scene through a 64-bit fingerprint, so applying it to the wrong scene fails
loudly instead of corrupting geometry.

Portable archives store only edit records, never full clouds. Sorted voxel
keys are delta-encoded (zig-zag varints on per-component differences of
consecutive keys), which is what makes archives a small fraction of a full
scene dump for sparse edits.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import formats
from .builder import Cuboid, LabelTaxonomy, oriented_box_contains
from .geometry import PointCloud, RigidTransform, as_point
from .voxels import VoxelKey, VoxelScene, voxel_keys_for

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"PCME"
ARCHIVE_VERSION = 1

#: Ground-contact tolerance for patch clouds (min z must be 0 within this).
GROUND_CONTACT_TOL = 1e-6

# ---------------------------------------------------------------------------
# Patches, ground model, selection regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    """A reusable static-object point cloud in its local frame.

    Patch clouds follow a ground-contact convention: min z == 0, so placing a
    patch is a pure rotation about z plus a translation to the ground height.
    """

    patch_id: str
    cloud: PointCloud
    label: str
    footprint: np.ndarray = None  # (2, 2): [[min_x, min_y], [max_x, max_y]]

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("patch cloud must be non-empty")
        zmin = float(self.cloud.points[:, 2].min())
        if abs(zmin) > GROUND_CONTACT_TOL:
            raise ValueError(
                f"patch {self.patch_id!r} violates ground contact: min z = {zmin:g}"
            )
        fp = np.array(
            [
                self.cloud.points[:, :2].min(axis=0),
                self.cloud.points[:, :2].max(axis=0),
            ]
        )
        fp.setflags(write=False)
        object.__setattr__(self, "footprint", fp)

    @classmethod
    def from_raw_cloud(cls, patch_id: str, cloud: PointCloud, label: str) -> "Patch":
        """Normalize an arbitrary cloud to the ground-contact convention."""
        pts = cloud.points.copy()
        pts[:, 2] -= pts[:, 2].min()
        return cls(patch_id, PointCloud(pts, cloud.ids), label)


@dataclass(frozen=True)
class PatchDatabase:
    """A keyed collection of patches plus summary metadata."""

    patches: Mapping[str, Patch]

    def __post_init__(self):
        for pid, patch in self.patches.items():
            if pid != patch.patch_id:
                raise ValueError("patch database key must equal patch_id")

    @property
    def manifest(self) -> dict:
        labels: dict[str, int] = {}
        for patch in self.patches.values():
            labels[patch.label] = labels.get(patch.label, 0) + 1
        return {"patch_count": len(self.patches), "labels": labels}

    def get(self, patch_id: str) -> Patch:
        try:
            return self.patches[patch_id]
        except KeyError:
            raise ValueError(f"unknown patch id: {patch_id!r}") from None

    def save_dir(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        entries = []
        for pid in sorted(self.patches):
            patch = self.patches[pid]
            fname = f"{pid}.ply"
            formats.write_ply(os.path.join(directory, fname), patch.cloud)
            entries.append({"patch_id": pid, "file": fname, "label": patch.label})
        manifest = {"patches": entries, **self.manifest}
        formats.atomic_write_bytes(
            os.path.join(directory, "manifest.json"),
            json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8"),
        )

    @classmethod
    def load_dir(cls, directory) -> "PatchDatabase":
        with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        patches = {}
        for entry in manifest["patches"]:
            cloud = formats.read_ply(os.path.join(directory, entry["file"]))
            patches[entry["patch_id"]] = Patch(entry["patch_id"], cloud, entry["label"])
        return cls(patches)


@dataclass(frozen=True)
class GroundModel:
    """Grid of ground heights: 2D cell key -> z meters."""

    cell_size: float
    heights: Mapping[tuple[int, int], float]

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("ground cell size must be positive")
        for z in self.heights.values():
            if not math.isfinite(z):
                raise ValueError("ground heights must be finite")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor(x / self.cell_size)),
            int(math.floor(y / self.cell_size)),
        )

    def height_at(self, x: float, y: float) -> float:
        cell = self.cell_of(x, y)
        try:
            return float(self.heights[cell])
        except KeyError:
            raise ValueError(f"no ground sample at ({x:g}, {y:g})") from None

    def to_dict(self) -> dict:
        return {
            "cell_size": self.cell_size,
            "cells": [[i, j, z] for (i, j), z in sorted(self.heights.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundModel":
        return cls(
            float(d["cell_size"]),
            {(int(i), int(j)): float(z) for i, j, z in d["cells"]},
        )

    def save_json(self, path) -> None:
        formats.atomic_write_bytes(
            path, json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        )

    @classmethod
    def load_json(cls, path) -> "GroundModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box, inclusive of its faces."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = as_point(self.min_corner)
        hi = as_point(self.max_corner)
        if not np.all(hi > lo):
            raise ValueError("box region must have positive extent")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=1)

    def to_dict(self) -> dict:
        return {
            "type": "box",
            "min": self.min_corner.tolist(),
            "max": self.max_corner.tolist(),
        }


@dataclass(frozen=True)
class SphereRegion:
    """Sphere, inclusive of its surface. Radius 0 selects exactly its center."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = as_point(self.center)
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        if not (math.isfinite(self.radius) and self.radius >= 0):
            raise ValueError("sphere radius must be non-negative")

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.linalg.norm(pts - self.center, axis=1) <= self.radius

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class CuboidRegion:
    """Oriented box selection, inclusive of its faces."""

    center: np.ndarray
    dims: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        center = as_point(self.center)
        dims = np.asarray(self.dims, dtype=np.float64).reshape(3).copy()
        if not np.all(dims > 0):
            raise ValueError("cuboid region dims must be positive")
        rot = RigidTransform(self.rotation, (0, 0, 0)).rotation
        center.setflags(write=False)
        dims.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def from_yaw(cls, center, dims, yaw: float) -> "CuboidRegion":
        return cls(center, dims, RigidTransform.about_z(yaw).rotation)

    def contains(self, points) -> np.ndarray:
        return oriented_box_contains(points, self.center, self.dims / 2.0, self.rotation)

    def to_dict(self) -> dict:
        return {
            "type": "cuboid",
            "center": self.center.tolist(),
            "dims": self.dims.tolist(),
            "rotation": self.rotation.tolist(),
        }


SelectionRegion = Union[BoxRegion, SphereRegion, CuboidRegion]


def region_from_dict(d: dict) -> SelectionRegion:
    kind = d.get("type")
    if kind == "box":
        return BoxRegion(np.asarray(d["min"]), np.asarray(d["max"]))
    if kind == "sphere":
        return SphereRegion(np.asarray(d["center"]), float(d["radius"]))
    if kind == "cuboid":
        return CuboidRegion(
            np.asarray(d["center"]), np.asarray(d["dims"]), np.asarray(d["rotation"])
        )
    raise ValueError(f"unknown selection region type: {kind!r}")


# ---------------------------------------------------------------------------
# Deltas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchInsertion:
    """One patch placement plus the exact voxel keys it occupies."""

    patch_id: str
    placement: RigidTransform
    inserted_keys: frozenset[VoxelKey]

    def __post_init__(self):
        object.__setattr__(self, "inserted_keys", frozenset(self.inserted_keys))


@dataclass(frozen=True)
class EditDelta:
    """A trackable edit: voxel keys to remove plus patch insertions.

    The delta targets exactly one base scene, identified by fingerprint.
    """

    removed_keys: frozenset[VoxelKey]
    insertions: tuple[PatchInsertion, ...]
    scene_fingerprint: int

    def __post_init__(self):
        object.__setattr__(self, "removed_keys", frozenset(self.removed_keys))
        object.__setattr__(self, "insertions", tuple(self.insertions))

    @classmethod
    def empty(cls, scene: VoxelScene) -> "EditDelta":
        return cls(frozenset(), (), scene.fingerprint())

    def all_inserted_keys(self) -> frozenset[VoxelKey]:
        keys: set[VoxelKey] = set()
        for ins in self.insertions:
            keys |= ins.inserted_keys
        return frozenset(keys)

    def touched_count(self) -> int:
        return len(self.removed_keys) + len(self.all_inserted_keys())


def delete_by_cuboid(
    scene: VoxelScene,
    cuboid: Cuboid,
    taxonomy: Optional[LabelTaxonomy] = None,
) -> EditDelta:
    """Remove every voxel whose center lies inside a static-labeled cuboid.

    Dynamic-labeled cuboids are refused: dynamic objects are filtered during
    map construction and are not valid targets for static scene edits.
    """
    taxonomy = taxonomy or LabelTaxonomy.default()
    if taxonomy.kind(cuboid.label) != "static":
        raise ValueError(f"refusing dynamic label for static edit: {cuboid.label!r}")
    inside = cuboid.contains(scene.centers())
    removed = frozenset(map(tuple, scene.keys[inside].tolist()))
    return EditDelta(removed, (), scene.fingerprint())


def delete_by_selection(scene: VoxelScene, region: SelectionRegion) -> EditDelta:
    """Remove every voxel whose center lies inside the selection region."""
    inside = region.contains(scene.centers())
    removed = frozenset(map(tuple, scene.keys[inside].tolist()))
    return EditDelta(removed, (), scene.fingerprint())


def insert_patch(
    scene: VoxelScene,
    db: PatchDatabase,
    patch_id: str,
    xy,
    yaw: float,
    ground: GroundModel,
) -> EditDelta:
    """Place a patch on the ground plane and record its voxelization.

    The placement rotates the patch by ``yaw`` about z and translates it to
    (x, y, ground height at xy). Inserting into already-occupied voxels is
    permitted (and logged), matching occlusion-free placement semantics where
    collision policy is the caller's concern.
    """
    patch = db.get(patch_id)
    x, y = (float(v) for v in xy)
    z = ground.height_at(x, y)
    placement = RigidTransform.about_z(yaw, (x, y, z))
    placed = placement.apply(patch.cloud.points)
    keys = voxel_keys_for(placed, scene.resolution, scene.origin)
    inserted = frozenset(map(tuple, np.unique(keys, axis=0).tolist()))
    overlap = inserted & scene.key_set()
    if overlap:
        logger.warning(
            "patch %s at (%.2f, %.2f) overlaps %d occupied voxels",
            patch_id,
            x,
            y,
            len(overlap),
        )
    insertion = PatchInsertion(patch_id, placement, inserted)
    return EditDelta(frozenset(), (insertion,), scene.fingerprint())


def _insertion_seed(ins: PatchInsertion) -> int:
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    h.update(ins.patch_id.encode("utf-8"))
    h.update(ins.placement.rotation.astype("<f8").tobytes())
    h.update(ins.placement.translation.astype("<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


def _synthetic_ids(ins: PatchInsertion, keys: Sequence[VoxelKey]) -> np.ndarray:
    """Provenance ids for inserted voxels: bit 63 set, remaining bits a stable
    hash of (patch id, placement, voxel key).

    Deriving ids from the insertion record itself (never from application
    order) makes sequential and merged delta application produce identical
    provenance, which the portable round-trip guarantee relies on.
    """
    from .voxels import _splitmix64, stable_key_hashes

    key_arr = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    seed = np.uint64(_insertion_seed(ins))
    mixed = _splitmix64(stable_key_hashes(key_arr) ^ seed)
    return mixed | np.uint64(1 << 63)


def is_synthetic_id(point_id: int) -> bool:
    return bool(int(point_id) >> 63)


def apply_delta(scene: VoxelScene, delta: EditDelta) -> VoxelScene:
    """Apply a delta, producing a new scene.

    Occupied keys become (occupied - removed) | inserted. Surviving voxels
    keep their provenance; inserted voxels get synthetic patch-tagged ids
    (merged with existing ids when inserting into occupied space).
    """
    if delta.scene_fingerprint != scene.fingerprint():
        raise ValueError("delta does not target this scene")
    key_set = scene.key_set()
    if not delta.removed_keys <= key_set:
        raise ValueError("delta removes keys absent from the scene")
    provenance: dict[VoxelKey, tuple[int, ...]] = {
        key: ids
        for key, ids in scene.provenance.items()
        if key not in delta.removed_keys
    }
    for ins in delta.insertions:
        ordered = sorted(ins.inserted_keys)
        ids = _synthetic_ids(ins, ordered)
        for key, synthetic in zip(ordered, ids):
            synthetic = int(synthetic)
            existing = provenance.get(key)
            if existing is None:
                provenance[key] = (synthetic,)
            else:
                provenance[key] = tuple(sorted(set(existing) | {synthetic}))
    keys = np.asarray(sorted(provenance), dtype=np.int64).reshape(-1, 3)
    return VoxelScene(scene.resolution, scene.origin, keys, provenance)


def merge_deltas(base: VoxelScene, first: EditDelta, second: EditDelta) -> EditDelta:
    """Collapse two sequential deltas into one delta targeting ``base``.

    ``second`` must target the scene produced by applying ``first``. On
    occupied sets, applying the merged delta equals applying the two deltas
    in sequence: removals become R1 | (R2 & base), and first-delta insertion
    keys that the second delta removes again are pruned from the record.
    """
    intermediate = apply_delta(base, first)
    if second.scene_fingerprint != intermediate.fingerprint():
        raise ValueError("delta does not target this scene")
    removed = first.removed_keys | (second.removed_keys & base.key_set())
    insertions = []
    for ins in first.insertions:
        insertions.append(
            PatchInsertion(
                ins.patch_id, ins.placement, ins.inserted_keys - second.removed_keys
            )
        )
    insertions.extend(second.insertions)
    insertions = [ins for ins in insertions if ins.inserted_keys]
    return EditDelta(removed, tuple(insertions), base.fingerprint())


def verify_insertions(delta: EditDelta, scene: VoxelScene, db: PatchDatabase) -> None:
    """Check that each insertion's key set matches re-voxelizing its patch."""
    for ins in delta.insertions:
        patch = db.get(ins.patch_id)
        placed = ins.placement.apply(patch.cloud.points)
        keys = voxel_keys_for(placed, scene.resolution, scene.origin)
        expected = frozenset(map(tuple, np.unique(keys, axis=0).tolist()))
        if expected != ins.inserted_keys:
            raise ValueError(
                f"insertion of {ins.patch_id!r} does not match its re-voxelization"
            )


# ---------------------------------------------------------------------------
# Portable archives
# ---------------------------------------------------------------------------


def _zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n) << 1) - 1


def _unzigzag(z: int) -> int:
    return (z >> 1) if (z & 1) == 0 else -((z + 1) >> 1)


def _write_varint(out: bytearray, value: int) -> None:
    while value >= 0x80:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)


def _read_varint(blob: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(blob):
            raise ValueError("portable archive corrupt")
        b = blob[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise ValueError("portable archive corrupt")


def _encode_key_set(keys: Iterable[VoxelKey]) -> bytes:
    ordered = sorted(keys)
    out = bytearray(struct.pack("<I", len(ordered)))
    prev = (0, 0, 0)
    for key in ordered:
        for c in range(3):
            _write_varint(out, _zigzag(key[c] - prev[c]))
        prev = key
    return bytes(out)


def _decode_key_set(blob: bytes, pos: int) -> tuple[frozenset[VoxelKey], int]:
    if pos + 4 > len(blob):
        raise ValueError("portable archive corrupt")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    keys = []
    prev = [0, 0, 0]
    for _ in range(count):
        for c in range(3):
            z, pos = _read_varint(blob, pos)
            prev[c] += _unzigzag(z)
        keys.append(tuple(prev))
    return frozenset(keys), pos


def _encode_delta(delta: EditDelta) -> bytes:
    out = bytearray()
    out += _encode_key_set(delta.removed_keys)
    out += struct.pack("<I", len(delta.insertions))
    for ins in delta.insertions:
        pid = ins.patch_id.encode("utf-8")
        out += struct.pack("<H", len(pid))
        out += pid
        out += ins.placement.rotation.astype("<f8").tobytes()
        out += ins.placement.translation.astype("<f8").tobytes()
        out += _encode_key_set(ins.inserted_keys)
    return bytes(out)


def _decode_delta(blob: bytes, pos: int, fingerprint: int) -> tuple[EditDelta, int]:
    removed, pos = _decode_key_set(blob, pos)
    if pos + 4 > len(blob):
        raise ValueError("portable archive corrupt")
    (n_ins,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    insertions = []
    for _ in range(n_ins):
        if pos + 2 > len(blob):
            raise ValueError("portable archive corrupt")
        (pid_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + pid_len + 96 > len(blob):
            raise ValueError("portable archive corrupt")
        patch_id = blob[pos : pos + pid_len].decode("utf-8")
        pos += pid_len
        rotation = np.frombuffer(blob, dtype="<f8", count=9, offset=pos).reshape(3, 3)
        pos += 72
        translation = np.frombuffer(blob, dtype="<f8", count=3, offset=pos)
        pos += 24
        keys, pos = _decode_key_set(blob, pos)
        insertions.append(PatchInsertion(patch_id, RigidTransform(rotation, translation), keys))
    return EditDelta(removed, tuple(insertions), fingerprint), pos


def archive_bytes(base_ref: Union[int, VoxelScene], deltas: Sequence[EditDelta]) -> bytes:
    """Serialize deltas against one base scene reference (its fingerprint)."""
    fingerprint = base_ref.fingerprint() if isinstance(base_ref, VoxelScene) else int(base_ref)
    for delta in deltas:
        if delta.scene_fingerprint != fingerprint:
            raise ValueError("all exported deltas must target the base scene")
    body = bytearray()
    body += ARCHIVE_MAGIC
    body += struct.pack("<H", ARCHIVE_VERSION)
    body += struct.pack("<Q", fingerprint)
    body += struct.pack("<I", len(deltas))
    for delta in deltas:
        body += _encode_delta(delta)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def export_portable(base_ref: Union[int, VoxelScene], deltas: Sequence[EditDelta], path) -> None:
    """Write a portable archive; stores only keys and placements."""
    formats.atomic_write_bytes(path, archive_bytes(base_ref, deltas))


def read_portable(path) -> tuple[int, list[EditDelta]]:
    """Parse an archive into (base fingerprint, deltas) without applying it."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_archive(blob)


def parse_archive(blob: bytes) -> tuple[int, list[EditDelta]]:
    if len(blob) < 4 + 2 + 8 + 4 + 4 or blob[:4] != ARCHIVE_MAGIC:
        raise ValueError("portable archive corrupt")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ValueError("portable archive corrupt")
    pos = 4
    (version,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if version != ARCHIVE_VERSION:
        raise ValueError("portable archive corrupt")
    (fingerprint,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    (n_deltas,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    deltas = []
    body_end = len(blob) - 4
    for _ in range(n_deltas):
        delta, pos = _decode_delta(blob, pos, fingerprint)
        deltas.append(delta)
    if pos != body_end:
        raise ValueError("portable archive corrupt")
    return fingerprint, deltas


def import_portable(path, base: VoxelScene) -> list[VoxelScene]:
    """Reconstruct the edited scenes an archive describes, one per delta."""
    fingerprint, deltas = read_portable(path)
    if fingerprint != base.fingerprint():
        raise ValueError("delta does not target this scene")
    return [apply_delta(base, delta) for delta in deltas]
