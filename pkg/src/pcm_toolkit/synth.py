"""Deterministic synthetic fixtures: scenes, cameras, scans, edits, truth.

Everything the pipeline consumes is generated at desk scale from a
:class:`SceneRecipe`: a ground platform, box structures and poles, dynamic
objects with cuboid annotations, posed survey scans (the map source),
per-camera reference scans of the current world (raycast through the pixel
grid, so occlusion tests always have nearby depth samples), trackable edit
scripts, and exact ground-truth change key sets.

All randomness flows through counter-based Philox streams keyed by the
recipe seed with one named stream per object category, so identical recipes
produce bit-identical fixtures on any platform.

Families:
  * ``generic``: filler town with a camera ring; no visibility guarantees.
  * ``clean_view``: one camera with a guaranteed-fully-visible demolished
    wall beyond the platform edge, optionally an occluded demolished object
    behind a closer structure, a demolished object behind the camera, and a
    thin newly-built wall for registration tests.
  * ``tall_building``: a demolished structure much taller than the camera's
    vertical coverage, so only its lower portion can ever be observed.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .builder import (
    Cuboid,
    LabelTaxonomy,
    PosedScan,
    STATIC_LABELS,
    build_static_scene,
)
from .editor import (
    CuboidRegion,
    EditDelta,
    GroundModel,
    Patch,
    PatchDatabase,
    apply_delta,
    delete_by_selection,
    insert_patch,
    merge_deltas,
)
from .geometry import (
    CameraModel,
    PointCloud,
    RigidTransform,
    SimilarityTransform,
)
from .metrics import DiffResult
from .projector import ChangeObject, ChangeSet3D
from .updater import CorrespondenceSet, PredictedReconstruction
from .voxels import DEFAULT_RESOLUTION, VoxelKey, VoxelScene

FAMILIES = ("generic", "clean_view", "tall_building")

# Angular layout constants for the clean_view family (tangents, radians-ish).
_OCC_HALF_ANGLE = 0.12
_OBJ_HALF_ANGLE = 0.05
_ANGLE_MARGIN = 0.15
_SURFACE_SPACING_FACTOR = 0.5  # box faces sampled at resolution * factor
_CORR_COUNT = 96
_CORR_PIXEL_MARGIN = 10.0


@dataclass(frozen=True)
class SceneRecipe:
    """Parameters of one synthetic fixture; JSON-serializable."""

    seed: int = 0
    family: str = "generic"
    extent: float = 32.0
    resolution: float = DEFAULT_RESOLUTION
    n_buildings: int = 4
    n_poles: int = 4
    n_dynamic: int = 2
    n_new_objects: int = 1
    n_demolished: int = 1
    n_occluded: int = 0
    n_out_of_view: int = 0
    n_cameras: int = 1
    image_width: int = 640
    image_height: int = 480
    focal_px: float = 400.0
    camera_height: float = 2.0
    scan_pixel_step: int = 2

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"infeasible recipe: unknown family {self.family!r}")
        if self.extent < 14:
            raise ValueError("infeasible recipe: extent below 14 m")
        if self.resolution <= 0:
            raise ValueError("infeasible recipe: resolution must be positive")
        counts = (
            self.n_buildings,
            self.n_poles,
            self.n_dynamic,
            self.n_new_objects,
            self.n_demolished,
            self.n_occluded,
            self.n_out_of_view,
        )
        if any(c < 0 for c in counts):
            raise ValueError("infeasible recipe: negative object count")
        if self.n_cameras < 1:
            raise ValueError("infeasible recipe: need at least one camera")
        if self.scan_pixel_step < 1:
            raise ValueError("infeasible recipe: scan pixel step must be >= 1")
        if self.family in ("clean_view", "tall_building"):
            if self.n_demolished != 1:
                raise ValueError(
                    f"infeasible recipe: {self.family} uses exactly one demolished structure"
                )
            if self.n_new_objects > 1 or self.n_occluded > 1 or self.n_out_of_view > 1:
                raise ValueError(
                    f"infeasible recipe: {self.family} supports at most one object per role"
                )
        if self.family == "tall_building" and (
            self.n_new_objects or self.n_occluded or self.n_out_of_view
        ):
            raise ValueError("infeasible recipe: tall_building places only the tall structure")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneRecipe":
        return cls(**json.loads(text))


def clean_view_recipe(seed: int = 0, **overrides) -> SceneRecipe:
    """clean_view with every role populated (occluded + behind-camera objects)."""
    base = SceneRecipe(
        seed=seed,
        family="clean_view",
        extent=16.0,
        n_buildings=1,
        n_poles=1,
        n_dynamic=1,
        n_new_objects=0,
        n_demolished=1,
        n_occluded=1,
        n_out_of_view=1,
        image_width=320,
        image_height=240,
        focal_px=200.0,
        n_cameras=1,
    )
    return replace(base, **overrides)


def oracle_recipe(seed: int = 0, **overrides) -> SceneRecipe:
    """clean_view variant whose ground-truth deletions are all fully visible."""
    base = SceneRecipe(
        seed=seed,
        family="clean_view",
        extent=45.0,
        n_buildings=6,
        n_poles=4,
        n_dynamic=2,
        n_new_objects=1,
        n_demolished=1,
        n_occluded=0,
        n_out_of_view=0,
        n_cameras=1,
    )
    return replace(base, **overrides)


def tall_building_recipe(seed: int = 0, **overrides) -> SceneRecipe:
    base = SceneRecipe(
        seed=seed,
        family="tall_building",
        extent=28.0,
        n_buildings=3,
        n_poles=2,
        n_dynamic=1,
        n_new_objects=0,
        n_demolished=1,
        n_cameras=1,
    )
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Box:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0

    def rotation(self) -> np.ndarray:
        return RigidTransform.about_z(self.yaw).rotation

    def footprint_radius(self) -> float:
        return math.hypot(self.dims[0], self.dims[1]) / 2.0


def _grounded_box(x: float, y: float, length: float, width: float, height: float, yaw: float = 0.0) -> _Box:
    return _Box((x, y, height / 2.0), (length, width, height), yaw)


def _sample_box_surface(box: _Box, spacing: float) -> np.ndarray:
    """Deterministic grid samples on all six faces, in world coordinates."""
    half = np.asarray(box.dims) / 2.0

    def axis_points(h: float) -> np.ndarray:
        n = max(2, int(math.ceil(2 * h / spacing)) + 1)
        return np.linspace(-h, h, n)

    xs, ys, zs = (axis_points(h) for h in half)
    faces = []
    for axis, (fixed, a, b) in enumerate(
        ((xs, ys, zs), (ys, xs, zs), (zs, xs, ys))
    ):
        ga, gb = np.meshgrid(a, b, indexing="ij")
        flat_a = ga.ravel()
        flat_b = gb.ravel()
        for sign in (-1.0, 1.0):
            pts = np.empty((flat_a.size, 3))
            pts[:, axis] = sign * half[axis]
            others = [i for i in range(3) if i != axis]
            pts[:, others[0]] = flat_a
            pts[:, others[1]] = flat_b
            faces.append(pts)
    local = np.vstack(faces)
    return local @ box.rotation().T + np.asarray(box.center)


def _ray_box_t(origin: np.ndarray, dirs: np.ndarray, box: _Box) -> np.ndarray:
    """Entry parameter t per ray for an oriented box; +inf where missed."""
    R = box.rotation()
    o = (origin - np.asarray(box.center)) @ R
    d = dirs @ R
    half = np.asarray(box.dims) / 2.0
    d_safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (-half - o) / d_safe
    t2 = (half - o) / d_safe
    tlo = np.minimum(t1, t2).max(axis=1)
    thi = np.maximum(t1, t2).min(axis=1)
    t = np.where((thi >= tlo) & (thi > 1e-6), np.maximum(tlo, 1e-6), np.inf)
    return t


def _ray_ground_t(origin: np.ndarray, dirs: np.ndarray, rect) -> np.ndarray:
    """Entry parameter for the z = 0 platform rectangle (x0, x1, y0, y1)."""
    x0, x1, y0, y1 = rect
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    x = origin[0] + t * dirs[:, 0]
    y = origin[1] + t * dirs[:, 1]
    ok = (t > 1e-6) & np.isfinite(t) & (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    return np.where(ok, t, np.inf)


def _raycast(origin: np.ndarray, dirs: np.ndarray, boxes: Sequence[_Box], rect) -> np.ndarray:
    t_best = _ray_ground_t(origin, dirs, rect)
    for box in boxes:
        t_best = np.minimum(t_best, _ray_box_t(origin, dirs, box))
    hit = np.isfinite(t_best)
    return origin + t_best[hit, None] * dirs[hit]


def _camera_at(position, yaw: float, recipe: SceneRecipe) -> CameraModel:
    """Level camera at ``position`` looking along ``yaw`` in the xy plane."""
    f = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([f[1], -f[0], 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.vstack([right, down, f])
    extr = RigidTransform(R, -R @ np.asarray(position, dtype=np.float64))
    return CameraModel(
        fx=recipe.focal_px,
        fy=recipe.focal_px,
        cx=recipe.image_width / 2.0,
        cy=recipe.image_height / 2.0,
        width=recipe.image_width,
        height=recipe.image_height,
        extrinsics=extr,
    )


def _pixel_grid_scan(
    cam: CameraModel,
    position: np.ndarray,
    boxes: Sequence[_Box],
    rect,
    step: int,
    timestamp: int,
) -> PosedScan:
    """Reference scan: raycast the current world through every step-th pixel.

    Sampling on the pixel grid guarantees that wherever geometry is visible,
    depth samples exist within ``step`` pixels of any projection, which is
    what the Chebyshev-neighborhood occlusion test needs.
    """
    us = np.arange(0, cam.width, step) + 0.5
    vs = np.arange(0, cam.height, step) + 0.5
    gu, gv = np.meshgrid(us, vs)
    dirs_cam = np.column_stack(
        [
            (gu.ravel() - cam.cx) / cam.fx,
            (gv.ravel() - cam.cy) / cam.fy,
            np.ones(gu.size),
        ]
    )
    dirs_world = dirs_cam @ cam.extrinsics.rotation
    hits = _raycast(position, dirs_world, boxes, rect)
    pose = RigidTransform(np.eye(3), position)
    return PosedScan(PointCloud(hits - position), pose, timestamp)


def _stream(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=seed & (2**64 - 1), counter=[0, 0, 0, zlib.crc32(label.encode())])
    )


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass
class _Layout:
    platform: tuple[float, float, float, float]  # x0, x1, y0, y1
    static_boxes: list[_Box]
    new_boxes: list[_Box]  # present now, absent from the outdated map
    demolished_boxes: list[_Box]  # only in the outdated map (world position)
    dynamic_boxes: list[tuple[_Box, str]]
    pole_boxes: list[_Box]
    cameras: list[tuple[np.ndarray, float]]  # position, yaw


def _place_one(
    rng: np.random.Generator,
    x_range,
    y_range,
    radius: float,
    taken: list[tuple[float, float, float]],
    what: str,
) -> tuple[float, float]:
    """Rejection-sample a center keeping footprint circles apart."""
    for _try in range(300):
        x = rng.uniform(*x_range)
        y = rng.uniform(*y_range)
        if all(
            math.hypot(x - px, y - py) >= pr + radius + 0.6 for px, py, pr in taken
        ):
            taken.append((x, y, radius))
            return x, y
    raise ValueError(f"infeasible recipe: cannot place {what} inside the extent")


def _fillers(
    recipe: SceneRecipe,
    layout: _Layout,
    static_region,
    dynamic_region,
    taken: Optional[list[tuple[float, float, float]]] = None,
) -> None:
    """Populate filler buildings, poles, and dynamic boxes.

    Regions are ((x0, x1), (y0, y1)). Dynamic objects only ever appear in the
    survey scans (annotated and filtered during map construction), so their
    region may overlap the camera frustum without affecting visibility tests.
    """
    rng_b = _stream(recipe.seed, "buildings")
    rng_p = _stream(recipe.seed, "poles")
    rng_d = _stream(recipe.seed, "dynamic")
    (sx, sy) = static_region
    (dx, dy) = dynamic_region
    span = math.hypot(sx[1] - sx[0], sy[1] - sy[0])
    dims_hi = max(2.6, min(6.0, 0.3 * span))
    taken = taken if taken is not None else []
    for _ in range(recipe.n_buildings):
        length = rng_b.uniform(2.5, dims_hi)
        width = rng_b.uniform(2.5, dims_hi)
        height = rng_b.uniform(2.5, 7.0)
        yaw = rng_b.uniform(0.0, math.pi)
        radius = math.hypot(length, width) / 2.0
        x, y = _place_one(rng_b, sx, sy, radius, taken, "buildings")
        layout.static_boxes.append(_grounded_box(x, y, length, width, height, yaw))
    for _ in range(recipe.n_poles):
        x, y = _place_one(rng_p, sx, sy, 0.2, taken, "poles")
        layout.pole_boxes.append(
            _grounded_box(x, y, 0.25, 0.25, rng_p.uniform(3.0, 5.0))
        )
    for _ in range(recipe.n_dynamic):
        yaw = rng_d.uniform(0.0, math.pi)
        x, y = _place_one(rng_d, dx, dy, 2.5, taken, "dynamic objects")
        layout.dynamic_boxes.append(
            (_grounded_box(x, y, 4.6, 1.9, 1.7, yaw), "REGULAR_VEHICLE")
        )


def _snap_to_cell_center(x: float, res: float) -> float:
    return (math.floor(x / res) + 0.5) * res


def _layout_clean_view(recipe: SceneRecipe) -> _Layout:
    half = recipe.extent / 2.0
    h = recipe.camera_height
    fy = recipe.focal_px
    res = recipe.resolution
    layout = _Layout((-half, half, -half, half), [], [], [], [], [], [])
    layout.cameras.append((np.array([0.0, 0.0, h]), 0.0))

    # Demolished wall beyond the platform's forward edge. The gap is sized so
    # the wall's lowest voxel row projects several pixels above the topmost
    # visible ground row; with nothing behind it, every voxel stays visible.
    needed_gap_px = 5.0
    denom = fy * h / half - needed_gap_px
    if denom <= 0:
        raise ValueError("infeasible recipe: platform too large for a clean view")
    x_wall = max(fy * (h - res / 2.0) / denom + 1.0, half + 1.2)
    if x_wall + 1.0 > 1.5 * recipe.extent:
        raise ValueError("infeasible recipe: demolished wall beyond ground coverage")
    wall_w = 4.0
    corridor = (wall_w / 2.0) / x_wall
    max_tan = 0.9 * (recipe.image_width / 2.0) / recipe.focal_px
    if corridor > 0.35:
        raise ValueError("infeasible recipe: demolished wall subtends too wide an angle")
    layout.demolished_boxes.append(_grounded_box(x_wall, 0.0, 0.8, wall_w, 4.0))

    if recipe.n_new_objects:
        x_new = _snap_to_cell_center(0.45 * half, res)
        half_angle_new = 0.9 / x_new
        tan_new = corridor + _ANGLE_MARGIN + half_angle_new
        if tan_new + half_angle_new > max_tan:
            raise ValueError("infeasible recipe: no room for the new wall in view")
        layout.new_boxes.append(
            _Box((x_new, -tan_new * x_new, 1.1), (0.18, 1.8, 2.2))
        )

    if recipe.n_occluded:
        x_occ = 0.35 * half
        x_hid = min(x_occ + 4.5, half - 1.0)
        if x_hid - x_occ < 2.0:
            raise ValueError("infeasible recipe: no room for an occluded object")
        tan_occ = corridor + _ANGLE_MARGIN + _OCC_HALF_ANGLE
        if tan_occ + _OCC_HALF_ANGLE > max_tan:
            raise ValueError("infeasible recipe: occluder does not fit the view")
        occluder = _grounded_box(
            x_occ, tan_occ * x_occ, 0.5, 2.0 * _OCC_HALF_ANGLE * x_occ, h + 0.10 * x_occ
        )
        hidden = _grounded_box(
            x_hid, tan_occ * x_hid, 0.6, 2.0 * _OBJ_HALF_ANGLE * x_hid, h + 0.06 * x_hid
        )
        layout.static_boxes.append(occluder)
        layout.demolished_boxes.append(hidden)

    if recipe.n_out_of_view:
        layout.demolished_boxes.append(
            _grounded_box(-0.5 * half, 0.3 * half, 1.0, 1.0, 1.6)
        )

    # Keep fillers clear of every placed object; dynamics may use the whole
    # platform since they never enter the static map or the reference scans.
    taken = [
        (b.center[0], b.center[1], b.footprint_radius())
        for b in layout.static_boxes + layout.new_boxes + layout.demolished_boxes
    ]
    static_region = ((-half + 1.5, -3.2), (-half + 1.5, half - 1.5))
    dynamic_region = ((-half + 1.5, half - 1.5), (-half + 1.5, half - 1.5))
    _fillers(recipe, layout, static_region, dynamic_region, taken)
    return layout


def _layout_tall_building(recipe: SceneRecipe) -> _Layout:
    half = recipe.extent / 2.0
    h = recipe.camera_height
    fy = recipe.focal_px
    layout = _Layout((-half, half, -half, half), [], [], [], [], [], [])
    layout.cameras.append((np.array([0.0, 0.0, h]), 0.0))
    x_wall = 0.45 * half
    visible_top = h + (recipe.image_height / 2.0) * x_wall / fy
    height = 2.5 * visible_top
    layout.demolished_boxes.append(_grounded_box(x_wall, 0.0, 0.8, 4.0, height))
    taken = [(x_wall, 0.0, 2.5)]
    static_region = ((-half + 1.5, -3.2), (-half + 1.5, half - 1.5))
    dynamic_region = ((-half + 1.5, half - 1.5), (-half + 1.5, half - 1.5))
    _fillers(recipe, layout, static_region, dynamic_region, taken)
    return layout


def _layout_generic(recipe: SceneRecipe) -> _Layout:
    half = recipe.extent / 2.0
    layout = _Layout((-half, half, -half, half), [], [], [], [], [], [])
    ring = 0.38 * recipe.extent
    for k in range(recipe.n_cameras):
        angle = 2.0 * math.pi * k / recipe.n_cameras
        pos = np.array(
            [ring * math.cos(angle), ring * math.sin(angle), recipe.camera_height]
        )
        layout.cameras.append((pos, angle + math.pi))
    area = (-half + 2.5, half - 2.5)
    taken: list[tuple[float, float, float]] = []
    _fillers(recipe, layout, (area, area), (area, area), taken)
    rng_new = _stream(recipe.seed, "new_objects")
    for _ in range(recipe.n_new_objects):
        length = rng_new.uniform(1.5, 4.0)
        width = rng_new.uniform(1.5, 4.0)
        height = rng_new.uniform(2.0, 5.0)
        radius = math.hypot(length, width) / 2.0
        x, y = _place_one(rng_new, area, area, radius, taken, "new objects")
        layout.new_boxes.append(_grounded_box(x, y, length, width, height))
    rng_dem = _stream(recipe.seed, "demolished")
    for _ in range(recipe.n_demolished):
        length = rng_dem.uniform(1.0, 3.0)
        width = rng_dem.uniform(1.0, 3.0)
        height = rng_dem.uniform(1.5, 4.0)
        radius = math.hypot(length, width) / 2.0
        x, y = _place_one(rng_dem, area, area, radius, taken, "demolished objects")
        layout.demolished_boxes.append(_grounded_box(x, y, length, width, height))
    return layout


# ---------------------------------------------------------------------------
# Bundle generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneBundle:
    """Everything one fixture provides, in memory."""

    recipe: SceneRecipe
    taxonomy: LabelTaxonomy
    ground: GroundModel
    patch_db: PatchDatabase
    up_to_date: VoxelScene
    outdated: VoxelScene
    delta: EditDelta
    edit_ops: tuple[dict, ...]
    cuboids: tuple[Cuboid, ...]
    cameras: tuple[CameraModel, ...]
    scans: tuple[PosedScan, ...]
    survey_scans: tuple[PosedScan, ...]
    changes: ChangeSet3D
    star_added_keys: frozenset[VoxelKey]
    star_deleted_keys: frozenset[VoxelKey]
    prediction: Optional[PredictedReconstruction]
    correspondences: Optional[CorrespondenceSet]
    prediction_similarity: Optional[SimilarityTransform]
    addition_camera: int = 0
    deletion_camera: int = 0

    def ground_truth_diff(self) -> DiffResult:
        """Ground-truth decomposition with the perfect update as prediction."""
        return DiffResult(
            resolution=self.up_to_date.resolution,
            origin=self.up_to_date.origin,
            added_keys=self.star_added_keys,
            deleted_keys=self.star_deleted_keys,
            star_added_keys=self.star_added_keys,
            star_deleted_keys=self.star_deleted_keys,
        )


def _centers_of(scene: VoxelScene, keys) -> np.ndarray:
    arr = np.asarray(sorted(keys), dtype=np.int64).reshape(-1, 3)
    return scene.origin + (arr + 0.5) * scene.resolution


def _survey_scans(world_points: np.ndarray, timestamp_base: int = 0) -> list[PosedScan]:
    """Split world samples into two posed scans with non-trivial poses."""
    scans = []
    for k in range(2):
        part = world_points[k::2]
        pose = RigidTransform.about_z(0.2 + 0.45 * k, (2.0 * k - 1.0, 0.5, 0.05 * k))
        cloud = PointCloud(pose.inverse().apply(part))
        scans.append(PosedScan(cloud, pose, timestamp_base + k))
    return scans


def _build_prediction(
    recipe: SceneRecipe,
    cam: CameraModel,
    cam_index: int,
    base: VoxelScene,
    outdated: VoxelScene,
    star_added: frozenset[VoxelKey],
    changes: ChangeSet3D,
):
    """Oracle predictor output: ground-truth geometry in a synthetic frame."""
    if not star_added:
        return None, None, None
    added_pts = _centers_of(base, star_added)
    u, v, z, valid = cam.project(added_pts)
    if recipe.family == "clean_view" and not valid.all():
        raise ValueError("infeasible recipe: new structure not fully in view")
    added_pts = added_pts[valid]
    added_uv = np.column_stack([u[valid], v[valid]])
    if len(added_pts) == 0:
        return None, None, None

    # Pixel boxes around every change object's projection; correspondence
    # points must stay clear of them to count as unchanged image regions.
    boxes = []
    for obj in changes.objects:
        ou, ov, _, ovalid = cam.project(obj.cloud.points)
        if ovalid.any():
            boxes.append(
                (
                    ou[ovalid].min() - _CORR_PIXEL_MARGIN,
                    ou[ovalid].max() + _CORR_PIXEL_MARGIN,
                    ov[ovalid].min() - _CORR_PIXEL_MARGIN,
                    ov[ovalid].max() + _CORR_PIXEL_MARGIN,
                )
            )

    unchanged = sorted(outdated.key_set() & base.key_set())
    cand = _centers_of(base, unchanged)
    cu, cv, cz, cvalid = cam.project(cand)
    clear = cvalid.copy()
    for (u0, u1, v0, v1) in boxes:
        clear &= ~((cu >= u0) & (cu <= u1) & (cv >= v0) & (cv <= v1))
    idx = np.nonzero(clear)[0]
    if len(idx) < 3:
        return None, None, None
    pick = idx[np.linspace(0, len(idx) - 1, min(_CORR_COUNT, len(idx))).astype(int)]
    corr_targets = cand[pick]
    corr_uv = np.column_stack([cu[pick], cv[pick]])

    rng = _stream(recipe.seed, "prediction")
    sim = SimilarityTransform(
        float(rng.uniform(0.6, 1.8)), _random_rotation(rng), rng.uniform(-5.0, 5.0, 3)
    )
    inv = sim.inverse()
    pred_cloud = PointCloud(inv.apply(np.vstack([added_pts, corr_targets])))
    pixels = np.vstack([added_uv, corr_uv])
    prediction = PredictedReconstruction(
        cloud=pred_cloud,
        pixels=pixels,
        image_indices=np.full(len(pred_cloud), cam_index, dtype=np.int64),
    )
    corr = CorrespondenceSet(inv.apply(corr_targets), corr_targets)
    return prediction, corr, sim


def generate(recipe: SceneRecipe) -> SceneBundle:
    """Produce a complete deterministic fixture bundle for one recipe."""
    recipe.validate()
    res = recipe.resolution
    if recipe.family == "clean_view":
        layout = _layout_clean_view(recipe)
    elif recipe.family == "tall_building":
        layout = _layout_tall_building(recipe)
    else:
        layout = _layout_generic(recipe)
    x0, x1, y0, y1 = layout.platform
    spacing = res * _SURFACE_SPACING_FACTOR

    current_boxes = layout.static_boxes + layout.pole_boxes + layout.new_boxes

    # Survey samples: the map source. Ground gets one sample per cell center;
    # box faces are sampled densely enough to occupy every crossed cell.
    gx = np.arange(x0 + res / 2.0, x1, res)
    gy = np.arange(y0 + res / 2.0, y1, res)
    ggx, ggy = np.meshgrid(gx, gy)
    ground_pts = np.column_stack([ggx.ravel(), ggy.ravel(), np.zeros(ggx.size)])
    parts = [ground_pts]
    parts += [_sample_box_surface(b, spacing) for b in current_boxes]
    parts += [_sample_box_surface(b, spacing) for b, _ in layout.dynamic_boxes]
    survey = _survey_scans(np.vstack(parts))

    cuboids = []
    for box, label in layout.dynamic_boxes:
        cuboids.append(
            Cuboid(box.center, np.asarray(box.dims) + 2e-6, box.rotation(), label)
        )
    static_label_cycle = sorted(STATIC_LABELS)
    for i, box in enumerate(layout.pole_boxes):
        cuboids.append(
            Cuboid(
                box.center,
                np.asarray(box.dims) + 2e-6,
                box.rotation(),
                static_label_cycle[i % len(static_label_cycle)],
            )
        )

    taxonomy = LabelTaxonomy.default()
    base = build_static_scene(survey, cuboids, taxonomy, res, origin=(0.0, 0.0, 0.0))

    # Ground model: flat z = 0 over one-and-a-half extents around the origin.
    reach = int(math.ceil(1.5 * recipe.extent))
    heights = {(i, j): 0.0 for i in range(-reach, reach) for j in range(-reach, reach)}
    ground = GroundModel(1.0, heights)

    patches = {}
    for i, box in enumerate(layout.demolished_boxes):
        pid = f"patch_{i:03d}"
        local = _Box((0.0, 0.0, box.dims[2] / 2.0), box.dims, 0.0)
        cloud = PointCloud(_sample_box_surface(local, spacing))
        label = static_label_cycle[i % len(static_label_cycle)]
        patches[pid] = Patch(pid, cloud, label)
    patch_db = PatchDatabase(patches)

    # Apply edits sequentially, folding them into one delta against the base.
    scene = base
    merged: Optional[EditDelta] = None
    edit_ops: list[dict] = []
    added_groups: list[tuple[str, frozenset[VoxelKey]]] = []
    deleted_groups: list[tuple[str, frozenset[VoxelKey]]] = []
    for i, box in enumerate(layout.new_boxes):
        region = CuboidRegion(
            box.center, np.asarray(box.dims) + res + 2e-6, box.rotation()
        )
        delta = delete_by_selection(scene, region)
        if not delta.removed_keys:
            raise ValueError("infeasible recipe: new structure produced no voxels")
        edit_ops.append({"op": "delete_selection", "region": region.to_dict()})
        added_groups.append((f"added_{i:02d}", delta.removed_keys))
        merged = delta if merged is None else merge_deltas(base, merged, delta)
        scene = apply_delta(scene, delta)
    for i, box in enumerate(layout.demolished_boxes):
        pid = f"patch_{i:03d}"
        xy = (box.center[0], box.center[1])
        delta = insert_patch(scene, patch_db, pid, xy, box.yaw, ground)
        edit_ops.append(
            {"op": "insert_patch", "patch_id": pid, "xy": list(xy), "yaw": box.yaw}
        )
        deleted_groups.append((f"deleted_{i:02d}", delta.insertions[0].inserted_keys))
        merged = delta if merged is None else merge_deltas(base, merged, delta)
        scene = apply_delta(scene, delta)
    outdated = scene
    if merged is None:
        merged = EditDelta.empty(base)

    removed_all: set[VoxelKey] = set()
    for _, keys in added_groups:
        removed_all |= keys
    inserted_all: set[VoxelKey] = set()
    for _, keys in deleted_groups:
        inserted_all |= keys
    star_added = frozenset(removed_all - inserted_all)
    star_deleted = frozenset(inserted_all - base.key_set())

    objects = [
        ChangeObject(name, PointCloud(_centers_of(base, keys)), "added")
        for name, keys in added_groups
    ]
    objects += [
        ChangeObject(name, PointCloud(_centers_of(base, keys)), "deleted")
        for name, keys in deleted_groups
    ]
    changes = ChangeSet3D(tuple(objects))

    cameras = tuple(_camera_at(pos, yaw, recipe) for pos, yaw in layout.cameras)
    rect = layout.platform
    scans = tuple(
        _pixel_grid_scan(cam, pos, current_boxes, rect, recipe.scan_pixel_step, 100 + k)
        for k, ((pos, _), cam) in enumerate(zip(layout.cameras, cameras))
    )

    prediction, corr, sim = _build_prediction(
        recipe, cameras[0], 0, base, outdated, star_added, changes
    )

    return SceneBundle(
        recipe=recipe,
        taxonomy=taxonomy,
        ground=ground,
        patch_db=patch_db,
        up_to_date=base,
        outdated=outdated,
        delta=merged,
        edit_ops=tuple(edit_ops),
        cuboids=tuple(cuboids),
        cameras=cameras,
        scans=scans,
        survey_scans=tuple(survey),
        changes=changes,
        star_added_keys=star_added,
        star_deleted_keys=star_deleted,
        prediction=prediction,
        correspondences=corr,
        prediction_similarity=sim,
        addition_camera=0,
        deletion_camera=0,
    )
