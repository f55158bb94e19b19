"""Map updating under given change masks: point deletion and point addition.

Deletion is conservative by construction: only map points that are inside
the camera frustum, unoccluded against the current world's depth reference,
and projected into a set mask pixel are proposed for removal. Points outside
the field of view or hidden behind closer geometry provide no evidence and
must remain.

Addition registers an externally predicted reconstruction (arbitrary scale
and frame) onto the map with a closed-form similarity fit (Kabsch-Umeyama)
over correspondences drawn from unchanged image regions, then returns the
transformed points whose source pixels lie inside the change masks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import CameraModel, PointCloud, SimilarityTransform, as_points
from .projector import (
    DEFAULT_OCCLUSION_MARGIN_M,
    DEFAULT_OCCLUSION_RADIUS_PX,
    ChangeMask,
    DepthReference,
    occluded_mask,
)
from .voxels import VoxelScene, scene_points, stable_key_hashes, voxel_keys_for

logger = logging.getLogger(__name__)

OUT_OF_VIEW = 0
OCCLUDED = 1
VISIBLE = 2

_CLASS_NAMES = {OUT_OF_VIEW: "out_of_view", OCCLUDED: "occluded", VISIBLE: "visible"}

#: Relative singular-value threshold below which a source set is degenerate.
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class VisibilityReport:
    """Per-point visibility classes for one camera; classes partition the cloud."""

    classes: np.ndarray  # int8 per point: OUT_OF_VIEW | OCCLUDED | VISIBLE

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.int8).copy()
        classes.setflags(write=False)
        object.__setattr__(self, "classes", classes)

    @property
    def counts(self) -> dict[str, int]:
        return {
            name: int(np.count_nonzero(self.classes == code))
            for code, name in _CLASS_NAMES.items()
        }

    @property
    def visible_mask(self) -> np.ndarray:
        return self.classes == VISIBLE

    @property
    def occluded_mask(self) -> np.ndarray:
        return self.classes == OCCLUDED

    @property
    def out_of_view_mask(self) -> np.ndarray:
        return self.classes == OUT_OF_VIEW


def classify_visibility(
    map_cloud: PointCloud,
    cam: CameraModel,
    ref: DepthReference,
    margin: float = DEFAULT_OCCLUSION_MARGIN_M,
    radius: int = DEFAULT_OCCLUSION_RADIUS_PX,
) -> VisibilityReport:
    """Classify each map point as out_of_view, occluded, or visible.

    ``ref`` must be built from the current world's geometry; a point is
    occluded when a reference sample within the occlusion neighborhood is
    closer by more than ``margin``.
    """
    n = len(map_cloud)
    classes = np.full(n, OUT_OF_VIEW, dtype=np.int8)
    if n == 0:
        return VisibilityReport(classes)
    u, v, z, valid = cam.project(map_cloud.points)
    if valid.any():
        occ = occluded_mask(u[valid], v[valid], z[valid], ref, radius, margin)
        classes[valid] = np.where(occ, OCCLUDED, VISIBLE)
    return VisibilityReport(classes)


def predict_deletions(
    p_out: VoxelScene,
    mask: ChangeMask,
    cam: CameraModel,
    ref: DepthReference,
    margin: float = DEFAULT_OCCLUSION_MARGIN_M,
    radius: int = DEFAULT_OCCLUSION_RADIUS_PX,
) -> PointCloud:
    """Voxel centers of the outdated map that the change mask deletes.

    A center is deleted iff it is visible per :func:`classify_visibility` and
    projects into a set mask pixel; out-of-view and occluded centers are never
    deleted. Returned ids are the scene's stable key hashes.
    """
    if (mask.width, mask.height) != (cam.width, cam.height):
        raise ValueError("mask dimensions do not match the camera")
    cloud = scene_points(p_out)
    report = classify_visibility(cloud, cam, ref, margin, radius)
    selected = report.visible_mask.copy()
    if selected.any():
        u, v, _, _ = cam.project(cloud.points[selected])
        pu = np.floor(u).astype(np.intp)
        pv = np.floor(v).astype(np.intp)
        selected[np.nonzero(selected)[0]] = mask.raster[pv, pu]
    logger.debug(
        "predict_deletions: %s -> %d deleted", report.counts, int(selected.sum())
    )
    return cloud.subset(selected)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired points: source in the predictor frame, target in the map frame."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        src = as_points(self.source).copy()
        dst = as_points(self.target).copy()
        if len(src) != len(dst):
            raise ValueError("source and target must pair up")
        src.setflags(write=False)
        dst.setflags(write=False)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", dst)

    def __len__(self) -> int:
        return len(self.source)


@dataclass(frozen=True)
class RegistrationResult:
    transform: SimilarityTransform
    rmse: float


def kabsch_umeyama(corr: CorrespondenceSet) -> RegistrationResult:
    """Closed-form similarity fit minimizing sum ||s R x + t - y||^2.

    The smallest singular value's sign is corrected so the returned rotation
    is always proper (det +1), even for reflection-only correspondences.
    Raises for fewer than 3 pairs or a collinear/degenerate source set.
    """
    if len(corr) < 3:
        raise ValueError("at least 3 correspondence pairs are required")
    src = corr.source
    dst = corr.target
    n = len(src)
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    xs = src - mu_src
    ys = dst - mu_dst

    spread = np.linalg.svd(xs, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= _RANK_TOL * spread[0]:
        raise ValueError("rank-deficient correspondence set (collinear source points)")

    cov = ys.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_src = float((xs**2).sum()) / n
    scale = float(np.trace(np.diag(D) @ S)) / var_src
    if scale <= 0:
        raise ValueError("rank-deficient correspondence set (non-positive scale)")
    t = mu_dst - scale * (R @ mu_src)
    transform = SimilarityTransform(scale, R, t)
    residuals = transform.apply(src) - dst
    rmse = float(np.sqrt((residuals**2).sum() / n))
    return RegistrationResult(transform, rmse)


@dataclass(frozen=True)
class PredictedReconstruction:
    """Image-derived 3D points in the predictor's arbitrary-scale frame.

    Each point carries its source pixel and image index; ``in_change_mask``
    flags, when present, must be consistent with the masks supplied at
    registration time.
    """

    cloud: PointCloud
    pixels: np.ndarray  # (N, 2) source pixel (u, v) per point
    image_indices: np.ndarray  # (N,) index into the mask list
    in_change_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2).copy()
        indices = np.asarray(self.image_indices, dtype=np.int64).reshape(-1).copy()
        if len(pixels) != len(self.cloud) or len(indices) != len(self.cloud):
            raise ValueError("pixels and image_indices must match the cloud length")
        pixels.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "image_indices", indices)
        if self.in_change_mask is not None:
            flags = np.asarray(self.in_change_mask, dtype=bool).reshape(-1).copy()
            if len(flags) != len(self.cloud):
                raise ValueError("in_change_mask must match the cloud length")
            flags.setflags(write=False)
            object.__setattr__(self, "in_change_mask", flags)


def _mask_rasters(masks: Sequence[Union[ChangeMask, np.ndarray]]) -> list[np.ndarray]:
    return [m.raster if isinstance(m, ChangeMask) else np.asarray(m, bool) for m in masks]


def points_in_masks(pred: PredictedReconstruction, masks: Sequence) -> np.ndarray:
    """Flag predicted points whose source pixel lies in a set mask pixel."""
    rasters = _mask_rasters(masks)
    flags = np.zeros(len(pred.cloud), dtype=bool)
    for image_index in np.unique(pred.image_indices):
        if image_index < 0 or image_index >= len(rasters):
            raise ValueError(f"image index {image_index} has no mask")
        raster = rasters[image_index]
        rows = pred.image_indices == image_index
        pu = np.floor(pred.pixels[rows, 0]).astype(np.intp)
        pv = np.floor(pred.pixels[rows, 1]).astype(np.intp)
        h, w = raster.shape
        in_frame = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
        hit = np.zeros(int(rows.sum()), dtype=bool)
        hit[in_frame] = raster[pv[in_frame], pu[in_frame]]
        flags[rows] = hit
    return flags


@dataclass(frozen=True)
class AdditionResult:
    """Registered new map points plus the similarity fit that produced them."""

    cloud: PointCloud
    transform: SimilarityTransform
    rmse: float
    selected_count: int


def register_addition(
    pred: PredictedReconstruction,
    corr: CorrespondenceSet,
    masks: Sequence[Union[ChangeMask, np.ndarray]],
) -> AdditionResult:
    """Fit the similarity on unchanged-region correspondences, then transform
    every predicted point whose source pixel falls inside a change mask.

    Correspondences must be drawn from unchanged image points; that
    precondition is the caller's, but stored ``in_change_mask`` flags are
    verified against the supplied masks when present.
    """
    fit = kabsch_umeyama(corr)
    flags = points_in_masks(pred, masks)
    if pred.in_change_mask is not None and not np.array_equal(pred.in_change_mask, flags):
        raise ValueError("in_change_mask flags are inconsistent with the supplied masks")
    selected = pred.cloud.subset(flags)
    added = PointCloud(fit.transform.apply(selected.points), selected.ids)
    logger.debug(
        "register_addition: %d/%d points in masks, rmse %.3g",
        len(added),
        len(pred.cloud),
        fit.rmse,
    )
    return AdditionResult(added, fit.transform, fit.rmse, len(added))


def dedupe_to_voxels(cloud: PointCloud, resolution: float, origin) -> PointCloud:
    """Keep the first point per voxel cell; used when accumulating additions
    from multiple images at the scene's resolution."""
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys_for(cloud.points, resolution, origin)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.subset(np.sort(first))


def apply_update(p_out: VoxelScene, p_del: PointCloud, p_add: PointCloud) -> VoxelScene:
    """Integrate predicted deletions and additions into an updated scene.

    Deleted points are mapped to voxel keys and dropped; added points are
    voxelized onto the scene grid. Surviving voxels keep their provenance;
    new voxels get stable key-hash ids.
    """
    removed = set()
    if len(p_del):
        removed = set(
            map(tuple, voxel_keys_for(p_del.points, p_out.resolution, p_out.origin).tolist())
        )
    provenance = {
        key: ids for key, ids in p_out.provenance.items() if key not in removed
    }
    if len(p_add):
        add_keys = np.unique(
            voxel_keys_for(p_add.points, p_out.resolution, p_out.origin), axis=0
        )
        hashes = stable_key_hashes(add_keys)
        for key, h in zip(map(tuple, add_keys.tolist()), hashes):
            provenance.setdefault(key, (int(h),))
    keys = np.asarray(sorted(provenance), dtype=np.int64).reshape(-1, 3)
    return VoxelScene(p_out.resolution, p_out.origin, keys, provenance)
