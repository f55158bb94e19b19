"""Point-cloud-map maintenance toolkit.

Voxelized static maps with per-voxel provenance, trackable scene edits with
a compact portable delta format, image-space change masks with occlusion
filtering, visibility-based point deletion, similarity registration of
predicted additions, and point-set distance metrics for scoring updates.
"""

from .builder import (
    Cuboid,
    DYNAMIC_LABELS,
    LabelTaxonomy,
    PosedScan,
    STATIC_LABELS,
    accumulate,
    build_static_scene,
    filter_dynamic,
)
from .editor import (
    BoxRegion,
    CuboidRegion,
    EditDelta,
    GroundModel,
    Patch,
    PatchDatabase,
    PatchInsertion,
    SphereRegion,
    apply_delta,
    delete_by_cuboid,
    delete_by_selection,
    export_portable,
    import_portable,
    insert_patch,
    merge_deltas,
    read_portable,
)
from .geometry import (
    CameraModel,
    Pixel,
    Point3,
    PointCloud,
    RigidTransform,
    SimilarityTransform,
    SpatialIndex,
    build_index,
    convex_hull_2d,
    nearest_distance,
    rasterize_polygon,
)
from .metrics import (
    DiffResult,
    MetricReport,
    UpdateEvaluation,
    chamfer,
    compare_clouds,
    diff_sets,
    evaluate_update,
    hausdorff,
    median_point,
    modified_hausdorff,
)
from .projector import (
    ChangeMask,
    ChangeObject,
    ChangeSet3D,
    DepthReference,
    OcclusionParams,
    SparseChangeProjection,
    build_change_mask,
    depth_reference,
    filter_occluded,
)
from .synth import (
    SceneBundle,
    SceneRecipe,
    clean_view_recipe,
    generate,
    oracle_recipe,
    tall_building_recipe,
)
from .updater import (
    AdditionResult,
    CorrespondenceSet,
    PredictedReconstruction,
    RegistrationResult,
    VisibilityReport,
    apply_update,
    classify_visibility,
    dedupe_to_voxels,
    kabsch_umeyama,
    predict_deletions,
    register_addition,
)
from .voxels import (
    DEFAULT_RESOLUTION,
    VoxelScene,
    load_scene,
    save_scene,
    scene_points,
    voxelize,
)

__version__ = "0.1.0"
