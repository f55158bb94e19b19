"""Scoring updated maps: set decomposition and point-set distances.

The added/deleted decomposition is exact set algebra on voxel keys:

    star_added   = up_to_date - outdated      star_deleted = outdated - up_to_date
    added        = updated    - outdated      deleted      = outdated - updated

Four complementary geometric distances compare predicted and ground-truth
change clouds, all built on the nearest-distance d(a, B) = inf over b of
||a - b||:

  * chamfer: mean of squared nearest distances, summed over both directions
    (units m^2, unlike the other three);
  * hausdorff: max of the two directed maxima (worst case);
  * modified_hausdorff: max of the two directed means (outlier robust);
  * median_point: max of the two directed medians (typical error; even counts
    use the mean of the two central order statistics).

Every metric has a brute-force O(N*M) oracle mode (``method="brute"``) for
cross-validating the indexed implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .geometry import PointCloud, SpatialIndex, as_points
from .voxels import VoxelKey, VoxelScene

METRIC_NAMES = ("chamfer", "hausdorff", "modified_hausdorff", "median_point")

_BRUTE_CHUNK = 512


@dataclass(frozen=True)
class DiffResult:
    """Key-set change decomposition plus the matching voxel-center clouds."""

    resolution: float
    origin: np.ndarray
    added_keys: frozenset[VoxelKey]
    deleted_keys: frozenset[VoxelKey]
    star_added_keys: frozenset[VoxelKey]
    star_deleted_keys: frozenset[VoxelKey]

    def _centers(self, keys: frozenset[VoxelKey]) -> PointCloud:
        arr = np.asarray(sorted(keys), dtype=np.int64).reshape(-1, 3)
        return PointCloud(self.origin + (arr + 0.5) * self.resolution)

    @property
    def added_cloud(self) -> PointCloud:
        return self._centers(self.added_keys)

    @property
    def deleted_cloud(self) -> PointCloud:
        return self._centers(self.deleted_keys)

    @property
    def star_added_cloud(self) -> PointCloud:
        return self._centers(self.star_added_keys)

    @property
    def star_deleted_cloud(self) -> PointCloud:
        return self._centers(self.star_deleted_keys)


def diff_sets(
    p_out: VoxelScene, p_upd: VoxelScene, p_star_upd: VoxelScene
) -> DiffResult:
    """Exact added/deleted key sets for a predicted and ground-truth update."""
    if not (p_out.grid_compatible(p_upd) and p_out.grid_compatible(p_star_upd)):
        raise ValueError("incompatible voxel grids")
    out_keys = p_out.key_set()
    upd_keys = p_upd.key_set()
    star_keys = p_star_upd.key_set()
    return DiffResult(
        resolution=p_out.resolution,
        origin=p_out.origin,
        added_keys=frozenset(upd_keys - out_keys),
        deleted_keys=frozenset(out_keys - upd_keys),
        star_added_keys=frozenset(star_keys - out_keys),
        star_deleted_keys=frozenset(out_keys - star_keys),
    )


def _cloud_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)


def _directed_distances(
    sources: np.ndarray, targets: np.ndarray, method: str, workers: int
) -> np.ndarray:
    """Nearest distance from each source point to the target set."""
    if method == "kdtree":
        return SpatialIndex(targets).nearest_distances(sources, workers=workers)
    if method == "brute":
        out = np.empty(len(sources))
        for start in range(0, len(sources), _BRUTE_CHUNK):
            block = sources[start : start + _BRUTE_CHUNK]
            diff = block[:, None, :] - targets[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            out[start : start + len(block)] = np.sqrt(d2.min(axis=1))
        return out
    raise ValueError(f"unknown method {method!r}")


def _both_directions(p, q, method, workers):
    ps = _cloud_points(p)
    qs = _cloud_points(q)
    if len(ps) == 0 or len(qs) == 0:
        raise ValueError("undefined on empty set")
    return (
        _directed_distances(ps, qs, method, workers),
        _directed_distances(qs, ps, method, workers),
    )


def chamfer(p, q, method: str = "kdtree", workers: int = 1) -> float:
    """Symmetric mean of squared nearest distances; units are m^2."""
    d_pq, d_qp = _both_directions(p, q, method, workers)
    return float((d_pq**2).mean() + (d_qp**2).mean())


def hausdorff(p, q, method: str = "kdtree", workers: int = 1) -> float:
    """Max of the two directed maximum nearest distances."""
    d_pq, d_qp = _both_directions(p, q, method, workers)
    return float(max(d_pq.max(), d_qp.max()))


def modified_hausdorff(p, q, method: str = "kdtree", workers: int = 1) -> float:
    """Max of the two directed mean nearest distances."""
    d_pq, d_qp = _both_directions(p, q, method, workers)
    return float(max(d_pq.mean(), d_qp.mean()))


def median_point(p, q, method: str = "kdtree", workers: int = 1) -> float:
    """Max of the two directed median nearest distances."""
    d_pq, d_qp = _both_directions(p, q, method, workers)
    return float(max(np.median(d_pq), np.median(d_qp)))


@dataclass(frozen=True)
class MetricReport:
    """All four distances for one cloud pair, with per-direction terms.

    Metrics are None (and listed in ``undefined``) when either side is empty:
    the distances are not defined there, and reporting 0 would fake a perfect
    score on a degenerate update.
    """

    chamfer_m2: Optional[float]
    hausdorff_m: Optional[float]
    modified_hausdorff_m: Optional[float]
    median_point_m: Optional[float]
    directed: dict
    counts: dict
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "chamfer_m2": self.chamfer_m2,
            "hausdorff_m": self.hausdorff_m,
            "modified_hausdorff_m": self.modified_hausdorff_m,
            "median_point_m": self.median_point_m,
            "directed": self.directed,
            "counts": self.counts,
            "undefined": list(self.undefined),
        }


def compare_clouds(p, q, method: str = "kdtree", workers: int = 1) -> MetricReport:
    """Full metric report for a predicted-vs-truth cloud pair."""
    ps = _cloud_points(p)
    qs = _cloud_points(q)
    counts = {"p": len(ps), "q": len(qs)}
    if len(ps) == 0 or len(qs) == 0:
        return MetricReport(
            None, None, None, None, directed={}, counts=counts, undefined=METRIC_NAMES
        )
    d_pq = _directed_distances(ps, qs, method, workers)
    d_qp = _directed_distances(qs, ps, method, workers)
    directed = {
        "p_to_q": {
            "max": float(d_pq.max()),
            "mean": float(d_pq.mean()),
            "median": float(np.median(d_pq)),
            "mean_sq": float((d_pq**2).mean()),
        },
        "q_to_p": {
            "max": float(d_qp.max()),
            "mean": float(d_qp.mean()),
            "median": float(np.median(d_qp)),
            "mean_sq": float((d_qp**2).mean()),
        },
    }
    return MetricReport(
        chamfer_m2=directed["p_to_q"]["mean_sq"] + directed["q_to_p"]["mean_sq"],
        hausdorff_m=max(directed["p_to_q"]["max"], directed["q_to_p"]["max"]),
        modified_hausdorff_m=max(directed["p_to_q"]["mean"], directed["q_to_p"]["mean"]),
        median_point_m=max(directed["p_to_q"]["median"], directed["q_to_p"]["median"]),
        directed=directed,
        counts=counts,
    )


@dataclass(frozen=True)
class UpdateEvaluation:
    """Reports for the addition pair (added vs star_added) and deletion pair."""

    addition: MetricReport
    deletion: MetricReport

    def to_dict(self) -> dict:
        return {"addition": self.addition.to_dict(), "deletion": self.deletion.to_dict()}


def evaluate_update(
    diff: DiffResult, method: str = "kdtree", workers: int = 1
) -> UpdateEvaluation:
    """Score a decomposed update: predicted vs ground-truth change clouds."""
    return UpdateEvaluation(
        addition=compare_clouds(
            diff.added_cloud, diff.star_added_cloud, method, workers
        ),
        deletion=compare_clouds(
            diff.deleted_cloud, diff.star_deleted_cloud, method, workers
        ),
    )
