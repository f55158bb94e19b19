"""Acceptance criteria for the toolkit, one test per criterion.

Each test prints a single [PASS]/[FAIL] line (run with ``pytest -s`` to see
them inline). Tolerances are pinned here and nowhere else.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from conftest import brute_nearest, random_rotation
from pcm_toolkit import synth
from pcm_toolkit.cli import main
from pcm_toolkit.editor import apply_delta, archive_bytes, parse_archive
from pcm_toolkit.formats import mask_png_bytes, read_ply
from pcm_toolkit.geometry import PointCloud, RigidTransform
from pcm_toolkit.metrics import (
    chamfer,
    compare_clouds,
    diff_sets,
    hausdorff,
    median_point,
    modified_hausdorff,
)
from pcm_toolkit.projector import build_change_mask, depth_reference
from pcm_toolkit.updater import (
    VISIBLE,
    CorrespondenceSet,
    classify_visibility,
    kabsch_umeyama,
    predict_deletions,
)
from pcm_toolkit.voxels import (
    make_scene,
    scene_points,
    scene_to_bytes,
    voxel_keys_for,
)


def _report(number: int, description: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] acceptance {number}: {description}{suffix}")
    assert ok, f"acceptance {number}: {description}{suffix}"


def _keys_of(cloud: PointCloud, resolution=0.2) -> set:
    return set(map(tuple, voxel_keys_for(cloud.points, resolution, (0, 0, 0)).tolist()))


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(1001)
    started = time.monotonic()
    worst = 0.0
    for _ in range(200):
        np_, nq = rng.integers(10, 2001, size=2)
        p = rng.uniform(-40, 40, (np_, 3))
        q = rng.uniform(-40, 40, (nq, 3))
        d_pq = brute_nearest(p, q)
        d_qp = brute_nearest(q, p)
        oracle = {
            "chamfer": (d_pq**2).mean() + (d_qp**2).mean(),
            "hausdorff": max(d_pq.max(), d_qp.max()),
            "modified_hausdorff": max(d_pq.mean(), d_qp.mean()),
            "median_point": max(np.median(d_pq), np.median(d_qp)),
        }
        report = compare_clouds(p, q, method="kdtree")
        got = {
            "chamfer": report.chamfer_m2,
            "hausdorff": report.hausdorff_m,
            "modified_hausdorff": report.modified_hausdorff_m,
            "median_point": report.median_point_m,
        }
        for name, want in oracle.items():
            rel = abs(got[name] - want) / abs(want)
            worst = max(worst, rel)
    elapsed = time.monotonic() - started
    _report(
        1,
        "indexed metrics match the brute-force oracle on 200 random pairs",
        worst <= 1e-12 and elapsed < 60.0,
        f"worst rel err {worst:.2e}, {elapsed:.1f} s",
    )


def test_criterion_2_hand_computed_fixtures():
    p1 = np.array([[0.0, 0.0, 0.0]])
    q1 = np.array([[1.0, 0.0, 0.0]])
    p2 = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    p3 = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    ok = (
        chamfer(p1, q1) == 2.0
        and hausdorff(p2, p1) == 2.0
        and modified_hausdorff(p2, p1) == 1.0
        and median_point(p3, p1) == 1.0
    )
    _report(2, "hand-computed metric fixtures pass exactly", ok)


def test_criterion_3_kabsch_umeyama_recovery():
    rng = np.random.default_rng(3003)
    worst_s = worst_r = worst_t = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 80))
        src = rng.uniform(-10, 10, (n, 3))
        R = random_rotation(rng)
        s = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        t = rng.uniform(-20, 20, 3)
        dst = s * src @ R.T + t
        fit = kabsch_umeyama(CorrespondenceSet(src, dst)).transform
        worst_s = max(worst_s, abs(fit.scale - s) / s)
        worst_r = max(worst_r, float(np.linalg.norm(fit.rotation - R)))
        worst_t = max(worst_t, float(np.linalg.norm(fit.translation - t)))
    dets_ok = True
    for _ in range(50):
        src = rng.uniform(-5, 5, (12, 3))
        mirrored = src.copy()
        mirrored[:, 0] *= -1.0
        fit = kabsch_umeyama(CorrespondenceSet(src, mirrored)).transform
        dets_ok &= abs(np.linalg.det(fit.rotation) - 1.0) < 1e-9
    ok = worst_s <= 1e-9 and worst_r <= 1e-9 and worst_t <= 1e-9 and dets_ok
    _report(
        3,
        "similarity recovery within 1e-9 over 1000 trials; reflections stay proper",
        ok,
        f"scale {worst_s:.1e}, rot {worst_r:.1e}, trans {worst_t:.1e}",
    )


def test_criterion_4_conservative_deletion():
    violations = 0
    recall_failures = 0
    for seed in range(100):
        bundle = synth.generate(synth.clean_view_recipe(seed=seed))
        cam = bundle.cameras[0]
        ref = depth_reference(bundle.scans[0], cam)
        _, mask = build_change_mask(bundle.changes, cam, ref)
        p_del = predict_deletions(
            bundle.outdated, mask.restricted_to_kind("deleted"), cam, ref
        )
        deleted_keys = _keys_of(p_del)
        report = classify_visibility(scene_points(bundle.outdated), cam, ref)
        classes = dict(
            zip(map(tuple, bundle.outdated.keys.tolist()), report.classes.tolist())
        )
        violations += sum(1 for k in deleted_keys if classes[k] != VISIBLE)
        # independent check: the behind-camera object's centers have negative
        # camera-frame depth, so none of its keys may ever be deleted
        behind = next(
            o for o in bundle.changes.objects if o.object_id == "deleted_02"
        )
        cam_z = cam.extrinsics.apply(behind.cloud.points)[:, 2]
        assert np.all(cam_z < 0)
        violations += len(_keys_of(behind.cloud) & deleted_keys)
        # the first deleted object is fully visible by construction
        visible_obj = next(
            o for o in bundle.changes.objects if o.object_id == "deleted_00"
        )
        target = _keys_of(visible_obj.cloud)
        if not target <= deleted_keys:
            recall_failures += 1
    ok = violations == 0 and recall_failures == 0
    _report(
        4,
        "no occluded/out-of-view deletions in 100 scenes; exact recall on visible objects",
        ok,
        f"{violations} violations, {recall_failures} recall failures",
    )


def test_criterion_5_tall_structure_altitude():
    bundle = synth.generate(synth.tall_building_recipe(seed=5))
    cam = bundle.cameras[0]
    ref = depth_reference(bundle.scans[0], cam)
    _, mask = build_change_mask(bundle.changes, cam, ref)
    p_del = predict_deletions(
        bundle.outdated, mask.restricted_to_kind("deleted"), cam, ref
    )
    deleted_keys = _keys_of(p_del)
    gt = sorted(bundle.star_deleted_keys)
    zs = np.array([k[2] for k in gt])
    lo, hi = zs.min(), zs.max()
    third = (hi - lo + 1) / 3.0

    def recovered_fraction(z0, z1):
        subset = [k for k in gt if z0 <= k[2] < z1]
        return sum(1 for k in subset if k in deleted_keys) / len(subset)

    bottom = recovered_fraction(lo, lo + third)
    top = recovered_fraction(lo + 2 * third, hi + 1)
    _report(
        5,
        "tall-structure recovery is strictly lower in the top third",
        top < bottom,
        f"bottom {bottom:.3f} vs top {top:.3f}",
    )


def test_criterion_6_portable_round_trip_and_compression():
    bundle = synth.generate(synth.oracle_recipe(seed=6))
    blob = archive_bytes(bundle.up_to_date, [bundle.delta])
    fingerprint, deltas = parse_archive(blob)
    rebuilt = apply_delta(bundle.up_to_date, deltas[0])
    exact = (
        rebuilt.key_set() == bundle.outdated.key_set()
        and rebuilt.provenance == bundle.outdated.provenance
        and deltas[0].insertions == bundle.delta.insertions
        and archive_bytes(fingerprint, deltas) == blob
    )

    # compression on a >= 100k voxel scene with a <= 5% delta
    n = 47  # 47^3 = 103,823 voxels
    xs = (np.arange(n) + 0.5) * 0.2
    grid = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    from pcm_toolkit.voxels import voxelize

    big = voxelize(PointCloud(grid), 0.2)
    from pcm_toolkit.editor import BoxRegion, delete_by_selection

    delta = delete_by_selection(big, BoxRegion((0, 0, 0), (4.2, 0.81, 0.81)))
    touched = len(delta.removed_keys)
    archive = archive_bytes(big, [delta])
    native = scene_to_bytes(big)
    ratio = len(archive) / len(native)
    ok = (
        exact
        and big.num_voxels >= 100_000
        and 0 < touched <= 0.05 * big.num_voxels
        and ratio <= 0.10
    )
    _report(
        6,
        "portable archives round-trip bit-exactly and compress sparse edits",
        ok,
        f"{touched} keys touched, archive/native = {ratio:.3%}",
    )


def test_criterion_7_change_mask_consistency():
    bundle = synth.generate(synth.clean_view_recipe(seed=77))
    cam = bundle.cameras[0]
    ref = depth_reference(bundle.scans[0], cam)
    sparse1, mask1 = build_change_mask(bundle.changes, cam, ref)
    sparse2, mask2 = build_change_mask(bundle.changes, cam, ref)

    contained = True
    for proj in sparse1.per_object:
        for pix in proj.pixels:
            i, j = pix.cell()
            contained &= bool(mask1.raster[j, i])

    survivors = {p.object_id: p.survivor_count for p in sparse1.per_object}
    hidden_empty = survivors["deleted_01"] == 0 and survivors["deleted_02"] == 0
    mask_ids = {o.object_id for o in mask1.objects}
    hidden_absent = "deleted_01" not in mask_ids and "deleted_02" not in mask_ids

    deterministic = mask_png_bytes(mask1.raster) == mask_png_bytes(mask2.raster)
    ok = contained and hidden_empty and hidden_absent and deterministic
    _report(
        7,
        "surviving pixels lie inside masks; hidden objects empty; output deterministic",
        ok,
    )


def test_criterion_8_set_operation_correctness():
    rng = np.random.default_rng(8008)
    failures = 0
    for _ in range(50):
        universe = [tuple(k) for k in rng.integers(-6, 6, (150, 3)).tolist()]
        def sample():
            keys = {k for k in universe if rng.random() < 0.5}
            return keys or {(99, 99, 99)}
        out_k, upd_k, star_k = sample(), sample(), sample()
        mk = lambda ks: make_scene(0.2, (0, 0, 0), {k: (1,) for k in ks})
        diff = diff_sets(mk(out_k), mk(upd_k), mk(star_k))
        ok = (
            diff.added_keys == {k for k in upd_k if k not in out_k}
            and diff.deleted_keys == {k for k in out_k if k not in upd_k}
            and diff.star_added_keys == {k for k in star_k if k not in out_k}
            and diff.star_deleted_keys == {k for k in out_k if k not in star_k}
        )
        failures += not ok
    _report(8, "set decomposition matches the per-key membership oracle", failures == 0)


def test_criterion_9_metric_invariance_suite():
    rng = np.random.default_rng(9009)
    worst_rigid = 0.0
    worst_scale = 0.0
    for _ in range(100):
        p = rng.uniform(-20, 20, (int(rng.integers(5, 300)), 3))
        q = rng.uniform(-20, 20, (int(rng.integers(5, 300)), 3))
        base = np.array(
            [chamfer(p, q), hausdorff(p, q), modified_hausdorff(p, q), median_point(p, q)]
        )
        g = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3))
        moved = np.array(
            [
                chamfer(g.apply(p), g.apply(q)),
                hausdorff(g.apply(p), g.apply(q)),
                modified_hausdorff(g.apply(p), g.apply(q)),
                median_point(g.apply(p), g.apply(q)),
            ]
        )
        worst_rigid = max(worst_rigid, float(np.max(np.abs(moved - base) / np.maximum(base, 1e-30))))
        s = float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))
        scaled = np.array(
            [
                chamfer(s * p, s * q),
                hausdorff(s * p, s * q),
                modified_hausdorff(s * p, s * q),
                median_point(s * p, s * q),
            ]
        )
        expected = base * np.array([s**2, s, s, s])
        worst_scale = max(worst_scale, float(np.max(np.abs(scaled - expected) / expected)))
    ok = worst_rigid <= 1e-9 and worst_scale <= 1e-9
    _report(
        9,
        "rigid invariance and scale covariance on 100 random pairs",
        ok,
        f"rigid drift {worst_rigid:.1e}, scale drift {worst_scale:.1e}",
    )


def test_criterion_10_end_to_end_pipeline(tmp_path):
    started = time.monotonic()
    recipe = synth.oracle_recipe(seed=7)
    (tmp_path / "recipe.json").write_text(recipe.to_json())
    bundle_dir = tmp_path / "bundle"
    assert main(["synth", "--recipe", str(tmp_path / "recipe.json"), "--out", str(bundle_dir)]) == 0

    edited = tmp_path / "edited"
    assert (
        main(
            [
                "edit",
                "--scene", str(bundle_dir / "up_to_date.pcm"),
                "--script", str(bundle_dir / "edit_script.json"),
                "--patches", str(bundle_dir / "patches"),
                "--ground", str(bundle_dir / "ground.json"),
                "--out", str(edited),
            ]
        )
        == 0
    )

    masks = tmp_path / "masks"
    assert (
        main(
            [
                "project",
                "--changes", str(bundle_dir / "changes.json"),
                "--cameras", str(bundle_dir / "cameras.json"),
                "--scans", str(bundle_dir / "scans"),
                "--out", str(masks),
            ]
        )
        == 0
    )

    deleted = tmp_path / "del"
    assert (
        main(
            [
                "delete",
                "--scene", str(edited / "edited.pcm"),
                "--cameras", str(bundle_dir / "cameras.json"),
                "--scans", str(bundle_dir / "scans"),
                "--mask", str(masks / "mask_cam0_deleted.png"),
                "--out", str(deleted),
            ]
        )
        == 0
    )

    added = tmp_path / "add"
    assert (
        main(
            [
                "add",
                "--prediction", str(bundle_dir / "prediction.ply"),
                "--correspondences", str(bundle_dir / "correspondences.txt"),
                "--masks", str(masks / "mask_cam0_added.png"),
                "--out", str(added),
            ]
        )
        == 0
    )

    evaldir = tmp_path / "eval"
    assert (
        main(
            [
                "eval",
                "--outdated", str(edited / "edited.pcm"),
                "--truth", str(bundle_dir / "up_to_date.pcm"),
                "--deletions", str(deleted / "p_del.ply"),
                "--additions", str(added / "p_add.ply"),
                "--out", str(evaldir),
            ]
        )
        == 0
    )
    elapsed = time.monotonic() - started

    scene_size = synth.generate(recipe).up_to_date.num_voxels
    results = json.loads((evaldir / "metrics.json").read_text())

    # addition pair: registered points against ground-truth added centers
    bundle = synth.generate(recipe)
    p_add = read_ply(added / "p_add.ply")
    gt_add = bundle.up_to_date.centers_for(bundle.star_added_keys)
    addition = compare_clouds(p_add, gt_add)
    addition_ok = all(
        value is not None and value < 0.1
        for value in (
            addition.hausdorff_m,
            addition.modified_hausdorff_m,
            addition.median_point_m,
            np.sqrt(addition.chamfer_m2),
        )
    )
    deletion_ok = (
        results["key_sets"]["deletion_keys_equal"] is True
        and results["deletion"]["chamfer_m2"] == 0.0
        and results["deletion"]["hausdorff_m"] == 0.0
        and results["deletion"]["modified_hausdorff_m"] == 0.0
        and results["deletion"]["median_point_m"] == 0.0
    )
    ok = elapsed < 120.0 and scene_size >= 50_000 and addition_ok and deletion_ok
    _report(
        10,
        "synth->edit->project->delete->add->eval under 120 s with oracle-perfect scores",
        ok,
        f"{scene_size} voxels, {elapsed:.1f} s, addition hausdorff {addition.hausdorff_m:.2e}",
    )
