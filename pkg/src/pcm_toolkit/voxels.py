"""Sparse voxel scenes with per-voxel provenance back to raw scan points.

A scene is a set of integer voxel keys on a fixed grid. Key of a point is
``floor((p - origin) / resolution)`` per axis, so cells are half-open:
a point exactly on a cell's upper boundary belongs to the next cell. Each
occupied key maps to the sorted ids of the raw points that fell inside it,
which is what makes voxel-level edits trackable back to the source scans.

The grid origin is stored explicitly; with float64 coordinates and integer
keys, city-scale scenes key exactly without precision loss.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .formats import atomic_write_bytes
from .geometry import PointCloud, as_point

#: Default grid resolution in meters.
DEFAULT_RESOLUTION = 0.20

VoxelKey = tuple[int, int, int]

_SCENE_HEADER = struct.Struct("<d3dQ")


def voxel_keys_for(points, resolution: float, origin) -> np.ndarray:
    """Integer voxel keys (N, 3) for an (N, 3) point array."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    origin = as_point(origin)
    return np.floor((pts - origin) / resolution).astype(np.int64)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x += np.uint64(0x9E3779B97F4A7C15)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def stable_key_hashes(keys: np.ndarray) -> np.ndarray:
    """Deterministic 64-bit id per voxel key; platform independent."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3).astype(np.uint64)
    h = _splitmix64(k[:, 0])
    h = _splitmix64(h ^ k[:, 1])
    h = _splitmix64(h ^ k[:, 2])
    return h


@dataclass(frozen=True, eq=False)
class VoxelScene:
    """Voxelized static map: occupied keys plus per-voxel provenance ids.

    ``keys`` is an (N, 3) int64 array, unique and lexicographically sorted.
    ``provenance`` maps each occupied key tuple to a sorted tuple of raw point
    ids; every list is non-empty by construction.
    """

    resolution: float
    origin: np.ndarray
    keys: np.ndarray
    provenance: Mapping[VoxelKey, tuple[int, ...]]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __eq__(self, other):
        if not isinstance(other, VoxelScene):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.keys, other.keys)
            and self.provenance == other.provenance
        )

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        origin = as_point(self.origin)
        origin.setflags(write=False)
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3).copy()
        keys.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "resolution", float(self.resolution))
        if len(self.provenance) != len(keys):
            raise ValueError("provenance must cover exactly the occupied keys")
        for ids in self.provenance.values():
            if len(ids) == 0:
                raise ValueError("provenance lists must be non-empty")

    @property
    def num_voxels(self) -> int:
        return len(self.keys)

    def key_set(self) -> frozenset[VoxelKey]:
        cached = self._cache.get("key_set")
        if cached is None:
            cached = frozenset(map(tuple, self.keys.tolist()))
            self._cache["key_set"] = cached
        return cached

    def centers(self) -> np.ndarray:
        """Voxel centers, one per occupied key, in key order."""
        return self.origin + (self.keys + 0.5) * self.resolution

    def centers_for(self, keys: Iterable[VoxelKey]) -> np.ndarray:
        arr = np.asarray(sorted(keys), dtype=np.int64).reshape(-1, 3)
        return self.origin + (arr + 0.5) * self.resolution

    def fingerprint(self) -> int:
        """64-bit digest binding resolution, origin, and the occupied key set."""
        cached = self._cache.get("fingerprint")
        if cached is None:
            h = hashlib.blake2b(digest_size=8)
            h.update(struct.pack("<d", self.resolution))
            h.update(self.origin.astype("<f8").tobytes())
            h.update(self.keys.astype("<i8").tobytes())
            cached = int.from_bytes(h.digest(), "little")
            self._cache["fingerprint"] = cached
        return cached

    def grid_compatible(self, other: "VoxelScene") -> bool:
        return self.resolution == other.resolution and bool(
            np.all(self.origin == other.origin)
        )


def make_scene(
    resolution: float,
    origin,
    provenance: Mapping[VoxelKey, tuple[int, ...]],
) -> VoxelScene:
    """Build a scene from a provenance mapping (keys are sorted here)."""
    keys = np.asarray(sorted(provenance), dtype=np.int64).reshape(-1, 3)
    prov = {k: tuple(provenance[k]) for k in map(tuple, keys.tolist())}
    return VoxelScene(resolution, origin, keys, prov)


def voxelize(cloud: PointCloud, resolution: float, origin=(0.0, 0.0, 0.0)) -> VoxelScene:
    """Voxelize a cloud, keeping per-voxel lists of contributing point ids.

    When the cloud carries no ids, positional indices are used. An empty
    cloud produces an empty scene.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    origin = as_point(origin)
    if len(cloud) == 0:
        return VoxelScene(resolution, origin, np.empty((0, 3), np.int64), {})
    keys = voxel_keys_for(cloud.points, resolution, origin)
    ids = cloud.ids if cloud.ids is not None else np.arange(len(cloud), dtype=np.uint64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq))
    grouped = np.split(ids[order], np.cumsum(counts)[:-1])
    provenance = {
        tuple(key): tuple(sorted(int(i) for i in group))
        for key, group in zip(uniq.tolist(), grouped)
    }
    return VoxelScene(resolution, origin, uniq, provenance)


def scene_points(scene: VoxelScene) -> PointCloud:
    """Canonical cloud of a scene: one point per voxel center, key-hash ids.

    Ordering is deterministic (lexicographic in keys), and re-voxelizing the
    result on the same grid reproduces the scene's key set exactly.
    """
    return PointCloud(scene.centers(), stable_key_hashes(scene.keys))


def scene_to_bytes(scene: VoxelScene) -> bytes:
    """Native binary scene: header, sorted keys as 3x int32, provenance blocks."""
    keys = scene.keys
    if len(keys) and (keys.max() >= 2**31 or keys.min() < -(2**31)):
        raise ValueError("voxel keys exceed int32 range of the native format")
    out = bytearray()
    out += _SCENE_HEADER.pack(scene.resolution, *scene.origin, len(keys))
    out += np.ascontiguousarray(keys).astype("<i4").tobytes()
    for key in map(tuple, keys.tolist()):
        ids = scene.provenance[key]
        out += struct.pack("<I", len(ids))
        out += np.asarray(ids, dtype="<u8").tobytes()
    return bytes(out)


def scene_from_bytes(blob: bytes) -> VoxelScene:
    if len(blob) < _SCENE_HEADER.size:
        raise ValueError("truncated scene file")
    resolution, ox, oy, oz, count = _SCENE_HEADER.unpack_from(blob, 0)
    pos = _SCENE_HEADER.size
    key_bytes = count * 12
    if len(blob) < pos + key_bytes:
        raise ValueError("truncated scene file")
    keys = (
        np.frombuffer(blob, dtype="<i4", count=count * 3, offset=pos)
        .reshape(-1, 3)
        .astype(np.int64)
    )
    pos += key_bytes
    provenance: dict[VoxelKey, tuple[int, ...]] = {}
    for key in map(tuple, keys.tolist()):
        if len(blob) < pos + 4:
            raise ValueError("truncated scene file")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if len(blob) < pos + 8 * n:
            raise ValueError("truncated scene file")
        ids = np.frombuffer(blob, dtype="<u8", count=n, offset=pos)
        pos += 8 * n
        provenance[key] = tuple(int(i) for i in ids)
    return VoxelScene(resolution, (ox, oy, oz), keys, provenance)


def save_scene(path, scene: VoxelScene) -> None:
    atomic_write_bytes(path, scene_to_bytes(scene))


def load_scene(path) -> VoxelScene:
    with open(path, "rb") as fh:
        return scene_from_bytes(fh.read())
