"""Synthetic fixture generator: determinism, self-consistency, families."""

from __future__ import annotations

import numpy as np
import pytest

from pcm_toolkit import synth
from pcm_toolkit.editor import apply_delta, verify_insertions
from pcm_toolkit.metrics import diff_sets
from pcm_toolkit.projector import depth_reference
from pcm_toolkit.updater import classify_visibility
from pcm_toolkit.voxels import scene_points, scene_to_bytes


class TestDeterminism:
    def test_bit_identical_bundles(self):
        a = synth.generate(synth.clean_view_recipe(seed=21))
        b = synth.generate(synth.clean_view_recipe(seed=21))
        assert scene_to_bytes(a.up_to_date) == scene_to_bytes(b.up_to_date)
        assert scene_to_bytes(a.outdated) == scene_to_bytes(b.outdated)
        assert a.delta == b.delta
        for sa, sb in zip(a.scans, b.scans):
            assert np.array_equal(sa.cloud.points, sb.cloud.points)
        for sa, sb in zip(a.survey_scans, b.survey_scans):
            assert np.array_equal(sa.cloud.points, sb.cloud.points)
        assert a.edit_ops == b.edit_ops
        if a.prediction is not None:
            assert np.array_equal(a.prediction.cloud.points, b.prediction.cloud.points)
            assert np.array_equal(a.correspondences.source, b.correspondences.source)

    def test_different_seeds_differ(self):
        a = synth.generate(synth.clean_view_recipe(seed=1))
        b = synth.generate(synth.clean_view_recipe(seed=2))
        assert scene_to_bytes(a.up_to_date) != scene_to_bytes(b.up_to_date)


class TestSelfConsistency:
    def test_diff_reproduces_ground_truth(self, generic_bundle):
        b = generic_bundle
        diff = diff_sets(b.outdated, b.up_to_date, b.up_to_date)
        assert diff.star_added_keys == b.star_added_keys
        assert diff.star_deleted_keys == b.star_deleted_keys

    def test_delta_applies_to_base(self, generic_bundle):
        b = generic_bundle
        assert apply_delta(b.up_to_date, b.delta) == b.outdated

    def test_insertions_match_revoxelization(self, generic_bundle):
        b = generic_bundle
        verify_insertions(b.delta, b.up_to_date, b.patch_db)

    def test_change_objects_cover_truth(self, generic_bundle):
        b = generic_bundle
        added = [o for o in b.changes.objects if o.change_kind == "added"]
        deleted = [o for o in b.changes.objects if o.change_kind == "deleted"]
        assert added and deleted
        for obj in deleted:
            # deleted-object points exist in the outdated scene
            from pcm_toolkit.voxels import voxel_keys_for

            keys = set(
                map(tuple, voxel_keys_for(obj.cloud.points, 0.2, (0, 0, 0)).tolist())
            )
            assert keys <= b.outdated.key_set()

    def test_deleted_count_vs_gt(self, clean_bundle):
        b = clean_bundle
        # ground truth excludes insertion keys already occupied in the base
        inserted = b.delta.all_inserted_keys()
        assert b.star_deleted_keys == inserted - b.up_to_date.key_set()


class TestFamilies:
    def test_tall_building_upper_out_of_view(self):
        b = synth.generate(synth.tall_building_recipe(seed=2))
        cam = b.cameras[0]
        ref = depth_reference(b.scans[0], cam)
        gt = sorted(b.star_deleted_keys)
        centers = b.outdated.centers_for(gt)
        report = classify_visibility(
            scene_points(b.outdated), cam, ref
        )
        zs = np.array([k[2] for k in gt])
        top = zs > zs.min() + 2 * (zs.max() - zs.min()) / 3
        # every top-third voxel projects above the image
        from pcm_toolkit.geometry import PointCloud

        top_report = classify_visibility(
            PointCloud(centers[np.nonzero(top)[0]]), cam, ref
        )
        assert top_report.counts["out_of_view"] == int(top.sum())

    def test_clean_view_roles(self, clean_bundle):
        kinds = [o.object_id for o in clean_bundle.changes.objects]
        assert any(k.startswith("deleted_") for k in kinds)
        assert len(clean_bundle.cameras) == 1
        assert clean_bundle.scans[0].cloud.points.shape[0] > 1000

    def test_generic_multi_camera(self, generic_bundle):
        assert len(generic_bundle.cameras) == 2
        assert len(generic_bundle.scans) == 2


class TestRecipes:
    def test_json_round_trip(self):
        recipe = synth.oracle_recipe(seed=9)
        again = synth.SceneRecipe.from_json(recipe.to_json())
        assert recipe == again

    def test_infeasible_extent(self):
        with pytest.raises(ValueError, match="infeasible recipe"):
            synth.generate(synth.SceneRecipe(extent=10.0))

    def test_unknown_family(self):
        with pytest.raises(ValueError, match="infeasible recipe"):
            synth.SceneRecipe(family="volcano").validate()

    def test_tall_rejects_extra_roles(self):
        with pytest.raises(ValueError, match="infeasible recipe"):
            synth.tall_building_recipe(seed=0, n_new_objects=1).validate()

    def test_crowded_recipe_fails_placement(self):
        with pytest.raises(ValueError, match="infeasible recipe"):
            synth.generate(
                synth.SceneRecipe(
                    family="generic", extent=16.0, n_buildings=40, n_poles=0, n_dynamic=0
                )
            )


class TestPrediction:
    def test_oracle_prediction_present(self):
        b = synth.generate(synth.oracle_recipe(seed=4))
        assert b.prediction is not None
        assert len(b.correspondences) >= 3
        # correspondences really are the synthetic similarity applied inverse
        sim = b.prediction_similarity
        assert np.allclose(
            sim.apply(b.correspondences.source), b.correspondences.target, atol=1e-9
        )

    def test_clean_view_without_new_objects_has_none(self, clean_bundle):
        assert clean_bundle.prediction is None
