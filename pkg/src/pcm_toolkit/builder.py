"""Build canonical up-to-date static maps from posed scans.

Pipeline: filter dynamic-object points using 3D cuboid annotations, accumulate
the surviving points into the world frame with stable provenance ids, and
voxelize at a fixed resolution (0.20 m by default). Filtering runs before
voxelization, so voxels whose points were all dynamic never exist.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud, RigidTransform, as_point
from .voxels import DEFAULT_RESOLUTION, VoxelScene, voxelize

logger = logging.getLogger(__name__)

# Argoverse-style label split: annotations with these labels stay in the map.
STATIC_LABELS = frozenset(
    {
        "BOLLARD",
        "CONSTRUCTION_BARREL",
        "CONSTRUCTION_CONE",
        "MESSAGE_BOARD_TRAILER",
        "MOBILE_PEDESTRIAN_CROSSING_SIGN",
        "OFFICIAL_SIGNALER",
        "SIGN",
        "STOP_SIGN",
        "TRAFFIC_LIGHT_TRAILER",
    }
)

# Annotations with these labels are filtered out of the raw scans.
DYNAMIC_LABELS = frozenset(
    {
        "ANIMAL",
        "ARTICULATED_BUS",
        "BICYCLE",
        "BICYCLIST",
        "BOX_TRUCK",
        "BUS",
        "DOG",
        "LARGE_VEHICLE",
        "MOTORCYCLE",
        "MOTORCYCLIST",
        "PEDESTRIAN",
        "RAILED_VEHICLE",
        "REGULAR_VEHICLE",
        "SCHOOL_BUS",
        "STROLLER",
        "TRUCK",
        "TRUCK_CAB",
        "VEHICULAR_TRAILER",
        "WHEELCHAIR",
        "WHEELED_DEVICE",
        "WHEELED_RIDER",
    }
)

#: Maximum points per scan supported by the packed (scan, point) id scheme.
MAX_POINTS_PER_SCAN = 2**32


@dataclass(frozen=True)
class LabelTaxonomy:
    """Disjoint static/dynamic label sets used to interpret cuboid annotations."""

    static_labels: frozenset[str]
    dynamic_labels: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "static_labels", frozenset(self.static_labels))
        object.__setattr__(self, "dynamic_labels", frozenset(self.dynamic_labels))
        if self.static_labels & self.dynamic_labels:
            raise ValueError("static and dynamic label sets must be disjoint")

    @classmethod
    def default(cls) -> "LabelTaxonomy":
        return cls(STATIC_LABELS, DYNAMIC_LABELS)

    @classmethod
    def from_json_file(cls, path) -> "LabelTaxonomy":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(frozenset(data["static_labels"]), frozenset(data["dynamic_labels"]))

    def kind(self, label: str) -> str:
        if label in self.static_labels:
            return "static"
        if label in self.dynamic_labels:
            return "dynamic"
        raise ValueError(f"label not in taxonomy: {label!r}")


def oriented_box_contains(points, center, half_dims, rotation) -> np.ndarray:
    """Inclusive containment test in the box's local frame; vectorized."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = (pts - np.asarray(center)) @ np.asarray(rotation)
    return np.all(np.abs(local) <= np.asarray(half_dims), axis=1)


@dataclass(frozen=True)
class Cuboid:
    """Oriented 3D box annotation: center + (length, width, height) + label.

    ``rotation`` maps the cuboid's local axes into the world frame; dims are
    full extents along the local x/y/z axes. Containment is inclusive of the
    faces and evaluated in the local frame, so the test has no
    orientation-dependent asymmetry.
    """

    center: np.ndarray
    dims: np.ndarray
    rotation: np.ndarray
    label: str

    def __post_init__(self):
        center = as_point(self.center)
        dims = np.asarray(self.dims, dtype=np.float64).reshape(3).copy()
        if not np.all(dims > 0):
            raise ValueError("cuboid dims must be positive")
        rigid = RigidTransform(self.rotation, (0.0, 0.0, 0.0))
        center.setflags(write=False)
        dims.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "rotation", rigid.rotation)

    @classmethod
    def from_yaw(cls, center, dims, yaw: float, label: str) -> "Cuboid":
        return cls(center, dims, RigidTransform.about_z(yaw).rotation, label)

    def contains(self, points) -> np.ndarray:
        return oriented_box_contains(points, self.center, self.dims / 2.0, self.rotation)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "dims": self.dims.tolist(),
            "rotation": self.rotation.tolist(),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cuboid":
        if "rotation" in d:
            rotation = np.asarray(d["rotation"], dtype=np.float64)
        elif "yaw" in d:
            rotation = RigidTransform.about_z(float(d["yaw"])).rotation
        else:
            raise ValueError("cuboid needs 'rotation' or 'yaw'")
        return cls(d["center"], d["dims"], rotation, d["label"])


def write_cuboids_json(path, cuboids: Sequence[Cuboid]) -> None:
    from .formats import atomic_write_bytes

    payload = json.dumps([c.to_dict() for c in cuboids], indent=1, sort_keys=True)
    atomic_write_bytes(path, payload.encode("utf-8"))


def read_cuboids_json(path) -> list[Cuboid]:
    with open(path, "r", encoding="utf-8") as fh:
        return [Cuboid.from_dict(d) for d in json.load(fh)]


@dataclass(frozen=True)
class PosedScan:
    """A sensor-frame point cloud with its sensor->world pose and timestamp."""

    cloud: PointCloud
    pose: RigidTransform
    timestamp: int = 0

    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.cloud.points)


def filter_dynamic(
    scan: PosedScan,
    cuboids: Sequence[Cuboid],
    taxonomy: Optional[LabelTaxonomy] = None,
) -> PosedScan:
    """Drop scan points whose world position falls inside a dynamic cuboid.

    Static-labeled cuboids remove nothing; an annotation label outside the
    taxonomy is an error. Containment is inclusive of cuboid faces. The
    returned scan stays in the sensor frame with the original pose.
    """
    taxonomy = taxonomy or LabelTaxonomy.default()
    kinds = [taxonomy.kind(c.label) for c in cuboids]
    if len(scan.cloud) == 0:
        return scan
    world = scan.world_points()
    remove = np.zeros(len(world), dtype=bool)
    for cuboid, kind in zip(cuboids, kinds):
        if kind != "dynamic":
            continue
        remove |= cuboid.contains(world)
    if not remove.any():
        return scan
    keep = ~remove
    logger.debug("filter_dynamic: removed %d of %d points", int(remove.sum()), len(world))
    return PosedScan(scan.cloud.subset(keep), scan.pose, scan.timestamp)


def accumulate(scans: Sequence[PosedScan]) -> PointCloud:
    """Concatenate pose-transformed scans into one world-frame cloud.

    Provenance ids pack (scan index, point index) into a single uint64 so a
    voxel can always be traced back to the raw measurement that produced it.
    """
    if not scans:
        raise ValueError("accumulate requires at least one scan")
    parts = []
    id_parts = []
    for scan_index, scan in enumerate(scans):
        n = len(scan.cloud)
        if n >= MAX_POINTS_PER_SCAN:
            raise ValueError("scan too large for packed provenance ids")
        parts.append(scan.pose.apply(scan.cloud.points))
        base = np.uint64(scan_index) << np.uint64(32)
        id_parts.append(base + np.arange(n, dtype=np.uint64))
    return PointCloud(np.vstack(parts), np.concatenate(id_parts))


def split_packed_id(packed: int) -> tuple[int, int]:
    """Inverse of the (scan index, point index) packing used by accumulate."""
    return int(packed) >> 32, int(packed) & 0xFFFFFFFF


def build_static_scene(
    scans: Sequence[PosedScan],
    cuboids: Sequence[Cuboid],
    taxonomy: Optional[LabelTaxonomy] = None,
    resolution: float = DEFAULT_RESOLUTION,
    origin=(0.0, 0.0, 0.0),
) -> VoxelScene:
    """Full map-building pipeline: filter dynamics, accumulate, voxelize."""
    taxonomy = taxonomy or LabelTaxonomy.default()
    filtered = [filter_dynamic(s, cuboids, taxonomy) for s in scans]
    cloud = accumulate(filtered)
    scene = voxelize(cloud, resolution, origin)
    logger.info(
        "built static scene: %d scans, %d points, %d voxels",
        len(scans),
        len(cloud),
        scene.num_voxels,
    )
    return scene
