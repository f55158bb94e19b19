"""Core geometric primitives for point-cloud map maintenance.

Points, rigid and similarity transforms, pinhole cameras, nearest-neighbor
queries, 2D convex hulls and convex-polygon rasterization.

Conventions:
  * World and sensor frames are right-handed, coordinates in meters, float64.
  * Camera frame: x right, y down, z forward (optical axis).
  * Image frame: u along columns (right), v along rows (down), origin at the
    top-left corner. Pixel (i, j) covers the half-open square
    [i, i+1) x [j, j+1); its center is (i + 0.5, j + 0.5).

All types are immutable after construction and every operation is a pure
function, so instances can be shared freely across worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

#: Tolerance for rotation-matrix orthonormality and unit determinant.
ORTHONORMAL_TOL = 1e-9

#: A finite float64 3-vector (meters). Used as an annotation alias.
Point3 = np.ndarray


def as_point(p: Iterable[float]) -> np.ndarray:
    """Coerce ``p`` to a finite float64 3-vector."""
    arr = np.asarray(p, dtype=np.float64).reshape(3).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


def as_points(points) -> np.ndarray:
    """Coerce to an (N, 3) float64 array without copying when possible."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def _frozen_array(value, shape) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rigid motion ``p -> R @ p + t`` with a proper rotation R."""

    rotation: np.ndarray
    translation: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, RigidTransform)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __post_init__(self):
        R = _frozen_array(self.rotation, (3, 3))
        t = _frozen_array(as_point(self.translation), (3,))
        if not np.all(np.isfinite(R)):
            raise ValueError("rotation must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def about_z(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation by ``yaw`` radians about +z, then translate."""
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, translation)

    @classmethod
    def from_quaternion_wxyz(cls, q, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from a (w, x, y, z) quaternion; normalizes internally."""
        w, x, y, z = (float(v) for v in q)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n == 0.0:
            raise ValueError("zero quaternion")
        w, x, y, z = w / n, x / n, y / n, z / n
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(R, translation)

    def quaternion_wxyz(self) -> np.ndarray:
        """Rotation as a unit (w, x, y, z) quaternion with w >= 0."""
        R = self.rotation
        tr = float(np.trace(R))
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2.0
            w = 0.25 * s
            x = (R[2, 1] - R[1, 2]) / s
            y = (R[0, 2] - R[2, 0]) / s
            z = (R[1, 0] - R[0, 1]) / s
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
            q = np.empty(4)
            q[1 + i] = 0.25 * s
            q[0] = (R[k, j] - R[j, k]) / s
            q[1 + j] = (R[j, i] + R[i, j]) / s
            q[1 + k] = (R[k, i] + R[i, k]) / s
            w, x, y, z = q
        quat = np.array([w, x, y, z])
        if quat[0] < 0:
            quat = -quat
        return quat / np.linalg.norm(quat)

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        out = as_points(pts) @ self.rotation.T + self.translation
        return out[0] if single else out

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the transform equivalent to applying ``other`` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["rotation"]), np.asarray(d["translation"]))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Similarity ``p -> s * R @ p + t`` with s > 0 and a proper rotation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, SimilarityTransform)
            and self.scale == other.scale
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.scale, self.rotation.tobytes(), self.translation.tobytes()))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive and finite")
        rigid = RigidTransform(self.rotation, self.translation)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rigid.rotation)
        object.__setattr__(self, "translation", rigid.translation)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        out = self.scale * (as_points(pts) @ self.rotation.T) + self.translation
        return out[0] if single else out

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        s = 1.0 / self.scale
        return SimilarityTransform(s, Rt, -s * (Rt @ self.translation))


@dataclass(frozen=True)
class Pixel:
    """Continuous image coordinates of a projected point plus its camera depth."""

    u: float
    v: float
    depth: float

    def __post_init__(self):
        if not (np.isfinite(self.depth) and self.depth > 0):
            raise ValueError("pixel depth must be positive")

    def cell(self) -> tuple[int, int]:
        """Integer pixel (column, row) containing this projection."""
        return int(math.floor(self.u)), int(math.floor(self.v))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus world->camera extrinsics.

    No lens distortion is modeled; image bounds are the half-open ranges
    [0, width) x [0, height).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Project world points; vectorized.

        Returns:
            (u, v, depth, valid) arrays. ``valid`` is True where the point is
            in front of the camera and (u, v) falls inside the image bounds;
            u/v/depth are undefined where invalid.
        """
        pts = as_points(points)
        cam = self.extrinsics.apply(pts)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        valid = (z > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return u, v, z, valid

    def project_point(self, p) -> Optional[Pixel]:
        """Project one world point; None when behind the camera or out of frame."""
        u, v, z, valid = self.project(as_point(p))
        if not valid[0]:
            return None
        return Pixel(float(u[0]), float(v[0]), float(z[0]))

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        """World point whose projection is (u, v) at camera depth ``depth``."""
        if depth <= 0:
            raise ValueError("depth must be positive")
        cam = np.array(
            [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth]
        )
        return self.extrinsics.inverse().apply(cam)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsics": self.extrinsics.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            extrinsics=RigidTransform.from_dict(d["extrinsics"]),
        )


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points with optional stable integer provenance ids."""

    points: np.ndarray
    ids: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.ids is None) != (other.ids is None):
            return False
        if self.ids is not None and not np.array_equal(self.ids, other.ids):
            return False
        return np.array_equal(self.points, other.points)

    def __post_init__(self):
        pts = as_points(self.points).copy() if np.size(self.points) else np.empty((0, 3))
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.ids is not None:
            ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1).copy()
            if len(ids) != len(pts):
                raise ValueError("ids must have the same length as points")
            if len(np.unique(ids)) != len(ids):
                raise ValueError("ids must be unique within a cloud")
            ids.setflags(write=False)
            object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 3)))

    def transformed(self, transform) -> "PointCloud":
        """Apply a rigid or similarity transform, preserving ids."""
        return PointCloud(transform.apply(self.points), self.ids)

    def subset(self, mask_or_indices) -> "PointCloud":
        idx = np.asarray(mask_or_indices)
        return PointCloud(
            self.points[idx], None if self.ids is None else self.ids[idx]
        )

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud.empty()
        pts = np.vstack([c.points for c in clouds])
        if all(c.ids is not None for c in clouds):
            ids = np.concatenate([c.ids for c in clouds])
        else:
            ids = None
        return PointCloud(pts, ids)


class SpatialIndex:
    """Immutable nearest-neighbor index over a point cloud.

    Queries agree with exhaustive search: the same Euclidean minimum distance,
    with ties on the nearest *point* broken toward the lowest index so results
    are reproducible.
    """

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
        if len(pts) == 0:
            raise ValueError("empty point set")
        self._points = np.array(pts, dtype=np.float64)
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest_distance(self, q) -> float:
        """Minimum Euclidean distance from ``q`` to the indexed cloud."""
        d, _ = self._tree.query(as_point(q))
        return float(d)

    def nearest(self, q) -> tuple[float, int]:
        """(distance, index) of the nearest point; ties -> lowest index."""
        q = as_point(q)
        d, i = self._tree.query(q)
        d = float(d)
        radius = d + 1e-12 * max(d, 1.0)
        candidates = self._tree.query_ball_point(q, radius)
        best = int(i)
        for c in candidates:
            if c < best and np.linalg.norm(self._points[c] - q) <= radius:
                best = c
        return d, best

    def nearest_distances(self, queries, workers: int = 1) -> np.ndarray:
        """Vectorized nearest distances for an (M, 3) query array."""
        d, _ = self._tree.query(as_points(queries), workers=workers)
        return np.atleast_1d(d)


def build_index(cloud) -> SpatialIndex:
    """Build an immutable nearest-neighbor index; raises on an empty cloud."""
    return SpatialIndex(cloud)


def nearest_distance(index: SpatialIndex, q) -> float:
    return index.nearest_distance(q)


def _cross2(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(pixels) -> np.ndarray:
    """Convex hull of 2D points via Andrew's monotone chain.

    Returns hull vertices in counter-clockwise order (positive signed area in
    (u, v) axes) with collinear interior points excluded. Degenerate inputs
    yield a 1-vertex polygon (single point) or a 2-vertex segment.
    """
    pts = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("no change pixels")
    if not np.all(np.isfinite(pts)):
        raise ValueError("pixel coordinates must be finite")
    uniq = np.unique(pts, axis=0)
    if len(uniq) <= 2:
        return uniq
    points = [tuple(p) for p in uniq]

    lower: list[tuple[float, float]] = []
    for p in points:
        while len(lower) > 1 and _cross2(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(points):
        while len(upper) > 1 and _cross2(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return np.asarray(hull, dtype=np.float64)


def _segment_cells(a, b) -> set[tuple[int, int]]:
    """Half-open grid cells traversed by segment a->b.

    A cell (i, j) is covered iff some point (x, y) of the segment satisfies
    floor(x) == i and floor(y) == j.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ts = {0.0, 1.0}
    for axis in range(2):
        lo, hi = sorted((a[axis], b[axis]))
        if hi == lo:
            continue
        for g in range(math.ceil(lo), math.floor(hi) + 1):
            t = (g - a[axis]) / (b[axis] - a[axis])
            if 0.0 <= t <= 1.0:
                ts.add(float(t))
    ordered = sorted(ts)
    cells: set[tuple[int, int]] = set()
    samples = list(ordered)
    samples.extend((t0 + t1) / 2.0 for t0, t1 in zip(ordered, ordered[1:]))
    for t in samples:
        p = a + t * (b - a)
        cells.add((int(math.floor(p[0])), int(math.floor(p[1]))))
    return cells


def rasterize_polygon(polygon, width: int, height: int) -> np.ndarray:
    """Rasterize a convex polygon into an (height, width) boolean mask.

    A pixel is set iff its center (i + 0.5, j + 0.5) lies inside or on the
    polygon. Degenerate polygons (one or two vertices, as produced by
    convex_hull_2d for collinear inputs) rasterize the cells they cover under
    the half-open pixel convention.
    """
    poly = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    if poly.shape[0] == 0:
        raise ValueError("no change pixels")
    mask = np.zeros((height, width), dtype=bool)

    def _mark(i: int, j: int) -> None:
        if 0 <= i < width and 0 <= j < height:
            mask[j, i] = True

    if len(poly) == 1:
        _mark(int(math.floor(poly[0, 0])), int(math.floor(poly[0, 1])))
        return mask
    if len(poly) == 2:
        for i, j in _segment_cells(poly[0], poly[1]):
            _mark(i, j)
        return mask

    umin, vmin = poly.min(axis=0)
    umax, vmax = poly.max(axis=0)
    i0 = max(int(math.floor(umin - 0.5)), 0)
    i1 = min(int(math.ceil(umax - 0.5)), width - 1)
    j0 = max(int(math.floor(vmin - 0.5)), 0)
    j1 = min(int(math.ceil(vmax - 0.5)), height - 1)
    if i1 < i0 or j1 < j0:
        return mask

    cu = np.arange(i0, i1 + 1) + 0.5
    cv = np.arange(j0, j1 + 1) + 0.5
    gu, gv = np.meshgrid(cu, cv)
    inside = np.ones(gu.shape, dtype=bool)
    n = len(poly)
    for k in range(n):
        a = poly[k]
        b = poly[(k + 1) % n]
        cross = (b[0] - a[0]) * (gv - a[1]) - (b[1] - a[1]) * (gu - a[0])
        inside &= cross >= 0.0
    mask[j0 : j1 + 1, i0 : i1 + 1] = inside
    return mask
