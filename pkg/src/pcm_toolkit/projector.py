"""Image-space change labels: projection, occlusion filtering, hull masks.

Changed 3D points are projected into a camera, filtered against a
synchronized reference scan of the current world (a projected change point
is dropped when nearby reference depth samples are closer by more than a
margin), and the survivors of each object are densified into a convex-hull
mask. Deleted-object points come from the outdated scene's geometry; the
reference scan represents the current world, which is what makes occlusion
of demolished structures meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import minimum_filter

from .builder import PosedScan
from .geometry import (
    CameraModel,
    Pixel,
    PointCloud,
    convex_hull_2d,
    rasterize_polygon,
)

CHANGE_KINDS = ("added", "deleted")

#: Default occlusion-test parameters: Chebyshev pixel radius and depth margin.
DEFAULT_OCCLUSION_RADIUS_PX = 2
DEFAULT_OCCLUSION_MARGIN_M = 0.3


@dataclass(frozen=True)
class OcclusionParams:
    radius_px: int = DEFAULT_OCCLUSION_RADIUS_PX
    margin_m: float = DEFAULT_OCCLUSION_MARGIN_M

    def __post_init__(self):
        if self.radius_px < 0:
            raise ValueError("occlusion radius must be non-negative")
        if self.margin_m <= 0:
            raise ValueError("occlusion margin must be positive")


@dataclass(frozen=True)
class ChangeObject:
    """One changed object: id, its 3D points (voxel centers), and change kind."""

    object_id: str
    cloud: PointCloud
    change_kind: str

    def __post_init__(self):
        if self.change_kind not in CHANGE_KINDS:
            raise ValueError(f"change_kind must be one of {CHANGE_KINDS}")
        if len(self.cloud) == 0:
            raise ValueError("change object groups must be non-empty")


@dataclass(frozen=True)
class ChangeSet3D:
    """Per-object groups of changed 3D points with unique object ids."""

    objects: tuple[ChangeObject, ...]

    def __post_init__(self):
        objects = tuple(self.objects)
        ids = [o.object_id for o in objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        object.__setattr__(self, "objects", objects)

    def of_kind(self, kind: str) -> "ChangeSet3D":
        return ChangeSet3D(tuple(o for o in self.objects if o.change_kind == kind))


class DepthReference:
    """Per-pixel minimum depth of a reference scan, seen from one camera.

    Conceptually a sparse pixel -> meters map; stored densely with +inf at
    pixels without samples. Multiple samples per pixel keep the minimum depth
    (closest surface wins). Immutable; window minima are cached per radius.
    """

    def __init__(self, width: int, height: int, depth: np.ndarray, sample_count: int):
        if depth.shape != (height, width):
            raise ValueError("depth image shape must be (height, width)")
        self.width = int(width)
        self.height = int(height)
        self._depth = depth
        self._depth.setflags(write=False)
        self.sample_count = int(sample_count)
        self._window_cache: dict[int, np.ndarray] = {}

    def at(self, u: int, v: int) -> Optional[float]:
        d = self._depth[v, u]
        return None if math.isinf(d) else float(d)

    def as_dict(self) -> dict[tuple[int, int], float]:
        vs, us = np.nonzero(np.isfinite(self._depth))
        return {
            (int(u), int(v)): float(self._depth[v, u]) for u, v in zip(us, vs)
        }

    def window_min(self, radius: int) -> np.ndarray:
        """Per-pixel minimum depth over a (2r+1)^2 Chebyshev neighborhood."""
        if radius < 0:
            raise ValueError("radius must be non-negative")
        cached = self._window_cache.get(radius)
        if cached is None:
            if radius == 0:
                cached = self._depth
            else:
                cached = minimum_filter(
                    self._depth, size=2 * radius + 1, mode="constant", cval=np.inf
                )
                cached.setflags(write=False)
            self._window_cache[radius] = cached
        return cached


def depth_reference(scan: PosedScan, cam: CameraModel) -> DepthReference:
    """Project a synchronized scan into the camera as a sparse depth map."""
    depth = np.full((cam.height, cam.width), np.inf)
    if len(scan.cloud) == 0:
        return DepthReference(cam.width, cam.height, depth, 0)
    u, v, z, valid = cam.project(scan.world_points())
    pu = np.floor(u[valid]).astype(np.intp)
    pv = np.floor(v[valid]).astype(np.intp)
    np.minimum.at(depth, (pv, pu), z[valid])
    return DepthReference(cam.width, cam.height, depth, int(valid.sum()))


def occluded_mask(
    u: np.ndarray,
    v: np.ndarray,
    depth: np.ndarray,
    ref: DepthReference,
    radius: int = DEFAULT_OCCLUSION_RADIUS_PX,
    margin: float = DEFAULT_OCCLUSION_MARGIN_M,
) -> np.ndarray:
    """Vectorized occlusion predicate for in-frame projections.

    True where some reference sample within Chebyshev pixel distance
    ``radius`` is closer than ``depth - margin``. Pixels with no nearby
    samples provide no occlusion evidence and stay False.
    """
    if margin <= 0:
        raise ValueError("occlusion margin must be positive")
    window = ref.window_min(radius)
    pu = np.floor(np.asarray(u, dtype=np.float64)).astype(np.intp)
    pv = np.floor(np.asarray(v, dtype=np.float64)).astype(np.intp)
    return window[pv, pu] < np.asarray(depth, dtype=np.float64) - margin


def filter_occluded(
    projections: Sequence[Pixel],
    ref: DepthReference,
    radius: int = DEFAULT_OCCLUSION_RADIUS_PX,
    margin: float = DEFAULT_OCCLUSION_MARGIN_M,
) -> list[Pixel]:
    """Drop projected change pixels that closer reference geometry hides."""
    if not projections:
        return []
    u = np.array([p.u for p in projections])
    v = np.array([p.v for p in projections])
    d = np.array([p.depth for p in projections])
    removed = occluded_mask(u, v, d, ref, radius, margin)
    return [p for p, r in zip(projections, removed) if not r]


@dataclass(frozen=True)
class ObjectProjection:
    """Occlusion-surviving projections of one object, with counts."""

    object_id: str
    change_kind: str
    pixels: tuple[Pixel, ...]
    input_count: int

    @property
    def survivor_count(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class SparseChangeProjection:
    """Per-object surviving change pixels for one camera."""

    per_object: tuple[ObjectProjection, ...]

    def survivors(self, object_id: str) -> tuple[Pixel, ...]:
        for proj in self.per_object:
            if proj.object_id == object_id:
                return proj.pixels
        raise KeyError(object_id)


@dataclass(frozen=True)
class MaskObject:
    """Hull polygon of one object's surviving pixels (pixel-center snapped)."""

    object_id: str
    change_kind: str
    polygon: np.ndarray  # (K, 2) counter-clockwise hull vertices

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2).copy()
        poly.setflags(write=False)
        object.__setattr__(self, "polygon", poly)


@dataclass(frozen=True)
class ChangeMask:
    """Binary change raster for one image plus its per-object hull polygons.

    The raster is exactly the union of the rasterized per-object hulls.
    """

    width: int
    height: int
    raster: np.ndarray
    objects: tuple[MaskObject, ...]

    def __post_init__(self):
        raster = np.asarray(self.raster, dtype=bool).copy()
        if raster.shape != (self.height, self.width):
            raise ValueError("raster shape must be (height, width)")
        raster.setflags(write=False)
        object.__setattr__(self, "raster", raster)
        object.__setattr__(self, "objects", tuple(self.objects))

    @classmethod
    def from_objects(
        cls, width: int, height: int, objects: Sequence[MaskObject]
    ) -> "ChangeMask":
        raster = np.zeros((height, width), dtype=bool)
        for obj in objects:
            raster |= rasterize_polygon(obj.polygon, width, height)
        return cls(width, height, raster, tuple(objects))

    def restricted_to_kind(self, kind: str) -> "ChangeMask":
        if kind not in CHANGE_KINDS:
            raise ValueError(f"change_kind must be one of {CHANGE_KINDS}")
        kept = [o for o in self.objects if o.change_kind == kind]
        return ChangeMask.from_objects(self.width, self.height, kept)


def _snap_to_pixel_centers(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unique centers of the pixels containing the given projections."""
    centers = np.column_stack([np.floor(u) + 0.5, np.floor(v) + 0.5])
    return np.unique(centers, axis=0)


def build_change_mask(
    changes: ChangeSet3D,
    cam: CameraModel,
    scan: Union[PosedScan, DepthReference],
    params: OcclusionParams = OcclusionParams(),
) -> tuple[SparseChangeProjection, ChangeMask]:
    """Project, occlusion-filter, hull, and rasterize each changed object.

    Hulls are computed over the centers of the pixels the surviving
    projections fall in, so with inclusive pixel-center rasterization every
    surviving change pixel is guaranteed to land inside its object's mask.
    Objects with no surviving pixels contribute nothing. The final raster is
    the union of the per-object hull rasters and is independent of object
    and point ordering.
    """
    ref = scan if isinstance(scan, DepthReference) else depth_reference(scan, cam)
    if (ref.width, ref.height) != (cam.width, cam.height):
        raise ValueError("depth reference dimensions do not match the camera")
    projections = []
    mask_objects = []
    for obj in changes.objects:
        u, v, z, valid = cam.project(obj.cloud.points)
        input_count = len(obj.cloud)
        u, v, z = u[valid], v[valid], z[valid]
        if len(u):
            keep = ~occluded_mask(u, v, z, ref, params.radius_px, params.margin_m)
            u, v, z = u[keep], v[keep], z[keep]
        pixels = tuple(
            Pixel(float(uu), float(vv), float(zz)) for uu, vv, zz in zip(u, v, z)
        )
        projections.append(
            ObjectProjection(obj.object_id, obj.change_kind, pixels, input_count)
        )
        if len(u):
            hull = convex_hull_2d(_snap_to_pixel_centers(u, v))
            mask_objects.append(MaskObject(obj.object_id, obj.change_kind, hull))
    mask = ChangeMask.from_objects(cam.width, cam.height, mask_objects)
    return SparseChangeProjection(tuple(projections)), mask


def sidecar_dict(sparse: SparseChangeProjection, mask: ChangeMask) -> dict:
    """JSON-serializable per-image summary: objects, polygons, counts."""
    polygons = {o.object_id: o.polygon.tolist() for o in mask.objects}
    return {
        "width": mask.width,
        "height": mask.height,
        "objects": [
            {
                "object_id": p.object_id,
                "change_kind": p.change_kind,
                "input_count": p.input_count,
                "survivor_count": p.survivor_count,
                "polygon": polygons.get(p.object_id),
            }
            for p in sparse.per_object
        ],
    }
