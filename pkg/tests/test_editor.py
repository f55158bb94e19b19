"""Scene edits: deletions, patch insertion, delta algebra, portable archives."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cuboid_contains_oracle
from pcm_toolkit.builder import Cuboid
from pcm_toolkit.editor import (
    BoxRegion,
    CuboidRegion,
    EditDelta,
    GroundModel,
    Patch,
    PatchDatabase,
    SphereRegion,
    _decode_key_set,
    _encode_key_set,
    _unzigzag,
    _zigzag,
    apply_delta,
    archive_bytes,
    delete_by_cuboid,
    delete_by_selection,
    export_portable,
    import_portable,
    insert_patch,
    is_synthetic_id,
    merge_deltas,
    parse_archive,
    read_portable,
    verify_insertions,
)
from pcm_toolkit.geometry import PointCloud
from pcm_toolkit.voxels import VoxelScene, scene_to_bytes, voxelize


def grid_scene(n=6, resolution=0.2) -> VoxelScene:
    xs = (np.arange(n) + 0.5) * resolution
    pts = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    return voxelize(PointCloud(pts), resolution)


def single_point_patch(pid="p0") -> Patch:
    return Patch(pid, PointCloud(np.array([[0.0, 0.0, 0.0]])), "SIGN")


def flat_ground(height=0.0, reach=60) -> GroundModel:
    return GroundModel(1.0, {(i, j): height for i in range(-reach, reach) for j in range(-reach, reach)})


class TestDeleteByCuboid:
    def test_enclosing_cuboid_removes_object(self):
        scene = grid_scene(3)
        cuboid = Cuboid.from_yaw((0.3, 0.1, 0.1), (0.55, 0.1, 0.1), 0.0, "SIGN")
        delta = delete_by_cuboid(scene, cuboid)
        assert delta.removed_keys == {(0, 0, 0), (1, 0, 0), (2, 0, 0)}
        assert delta.insertions == ()

    def test_no_centers_inside_is_empty(self):
        scene = grid_scene(2)
        cuboid = Cuboid.from_yaw((5.0, 5.0, 5.0), (0.1, 0.1, 0.1), 0.0, "SIGN")
        assert delete_by_cuboid(scene, cuboid).removed_keys == frozenset()

    def test_overlapping_deletions_compose_by_union(self):
        scene = grid_scene(4)
        a = delete_by_cuboid(scene, Cuboid.from_yaw((0.4, 0.4, 0.1), (0.9, 0.9, 0.1), 0.0, "SIGN"))
        b = delete_by_cuboid(scene, Cuboid.from_yaw((0.6, 0.6, 0.1), (0.9, 0.9, 0.1), 0.0, "SIGN"))
        merged = merge_deltas(scene, a, EditDelta(b.removed_keys, (), apply_delta(scene, a).fingerprint()))
        assert merged.removed_keys == a.removed_keys | b.removed_keys

    def test_dynamic_label_refused(self):
        scene = grid_scene(2)
        cuboid = Cuboid.from_yaw((0, 0, 0), (1, 1, 1), 0.0, "REGULAR_VEHICLE")
        with pytest.raises(ValueError, match="refusing dynamic label"):
            delete_by_cuboid(scene, cuboid)


class TestDeleteBySelection:
    def test_zero_radius_sphere_hits_exact_center(self):
        scene = grid_scene(3)
        center = (np.array([1, 1, 1]) + 0.5) * scene.resolution
        delta = delete_by_selection(scene, SphereRegion(center, 0.0))
        assert delta.removed_keys == {(1, 1, 1)}

    def test_box_covering_everything(self):
        scene = grid_scene(3)
        delta = delete_by_selection(scene, BoxRegion((-1, -1, -1), (2, 2, 2)))
        assert delta.removed_keys == scene.key_set()

    def test_random_boxes_match_per_voxel_oracle(self):
        rng = np.random.default_rng(8)
        scene = grid_scene(7)
        centers = scene.centers()
        keys = [tuple(k) for k in scene.keys.tolist()]
        for _ in range(20):
            lo = rng.uniform(-0.2, 1.2, 3)
            hi = lo + rng.uniform(0.1, 1.0, 3)
            delta = delete_by_selection(scene, BoxRegion(lo, hi))
            expected = {
                k
                for k, c in zip(keys, centers)
                if np.all(c >= lo) and np.all(c <= hi)
            }
            assert delta.removed_keys == expected

    def test_oriented_cuboid_region_matches_oracle(self):
        rng = np.random.default_rng(9)
        scene = grid_scene(6)
        centers = scene.centers()
        keys = [tuple(k) for k in scene.keys.tolist()]
        region = CuboidRegion.from_yaw((0.6, 0.6, 0.4), (0.8, 0.4, 0.5), 0.6)
        delta = delete_by_selection(scene, region)
        expected = {
            k
            for k, c in zip(keys, centers)
            if cuboid_contains_oracle(c, region.center, region.dims, region.rotation)
        }
        assert delta.removed_keys == expected


class TestInsertPatch:
    def test_single_point_patch_key(self):
        scene = grid_scene(2)
        db = PatchDatabase({"p0": single_point_patch()})
        ground = flat_ground(1.5)
        delta = insert_patch(scene, db, "p0", (3.0, 4.0), 0.0, ground)
        (ins,) = delta.insertions
        expected_key = (
            int(np.floor(3.0 / 0.2)),
            int(np.floor(4.0 / 0.2)),
            int(np.floor(1.5 / 0.2)),
        )
        assert ins.inserted_keys == {expected_key}

    def test_unknown_patch_errors(self):
        scene = grid_scene(2)
        with pytest.raises(ValueError, match="unknown patch id"):
            insert_patch(scene, PatchDatabase({}), "nope", (0, 0), 0.0, flat_ground())

    def test_missing_ground_errors(self):
        scene = grid_scene(2)
        db = PatchDatabase({"p0": single_point_patch()})
        ground = GroundModel(1.0, {(0, 0): 0.0})
        with pytest.raises(ValueError, match="no ground sample"):
            insert_patch(scene, db, "p0", (55.0, 55.0), 0.0, ground)

    def test_inserted_keys_match_revoxelization(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 1.5, (100, 3))
        pts[:, 2] -= pts[:, 2].min()
        patch = Patch("blob", PointCloud(pts), "SIGN")
        db = PatchDatabase({"blob": patch})
        scene = grid_scene(4)
        delta = insert_patch(scene, db, "blob", (2.0, -1.0), 0.7, flat_ground(0.4))
        verify_insertions(delta, scene, db)

    def test_two_placements_give_two_records(self):
        scene = grid_scene(3)
        db = PatchDatabase({"p0": single_point_patch()})
        ground = flat_ground(0.0)
        d1 = insert_patch(scene, db, "p0", (1.0, 1.0), 0.0, ground)
        s1 = apply_delta(scene, d1)
        d2 = insert_patch(s1, db, "p0", (3.0, 3.0), 0.0, ground)
        merged = merge_deltas(scene, d1, d2)
        assert len(merged.insertions) == 2
        keys = [next(iter(i.inserted_keys)) for i in merged.insertions]
        assert keys[0] != keys[1]

    def test_ground_contact_convention_enforced(self):
        with pytest.raises(ValueError, match="ground contact"):
            Patch("bad", PointCloud(np.array([[0.0, 0.0, 0.5]])), "SIGN")
        fixed = Patch.from_raw_cloud("ok", PointCloud(np.array([[0.0, 0.0, 0.5]])), "SIGN")
        assert fixed.cloud.points[0, 2] == 0.0


class TestApplyDelta:
    def test_empty_delta_is_identity(self):
        scene = grid_scene(3)
        assert apply_delta(scene, EditDelta.empty(scene)) == scene

    def test_removal(self):
        scene = grid_scene(3)
        delta = delete_by_selection(scene, SphereRegion((0.1, 0.1, 0.1), 0.05))
        out = apply_delta(scene, delta)
        assert out.key_set() == scene.key_set() - delta.removed_keys

    def test_diff_recovers_delta(self):
        scene = grid_scene(4)
        db = PatchDatabase({"p0": single_point_patch()})
        d1 = delete_by_selection(scene, BoxRegion((0, 0, 0), (0.41, 0.41, 0.41)))
        s1 = apply_delta(scene, d1)
        d2 = insert_patch(s1, db, "p0", (5.0, 5.0), 0.0, flat_ground())
        out = apply_delta(s1, d2)
        removed = scene.key_set() - out.key_set()
        added = out.key_set() - scene.key_set()
        assert removed == d1.removed_keys
        assert added == d2.insertions[0].inserted_keys

    def test_fingerprint_mismatch_rejected(self):
        scene = grid_scene(3)
        other = grid_scene(4)
        delta = EditDelta(frozenset(), (), other.fingerprint())
        with pytest.raises(ValueError, match="does not target this scene"):
            apply_delta(scene, delta)

    def test_inserted_voxels_carry_synthetic_ids(self):
        scene = grid_scene(2)
        db = PatchDatabase({"p0": single_point_patch()})
        delta = insert_patch(scene, db, "p0", (5.0, 5.0), 0.0, flat_ground())
        out = apply_delta(scene, delta)
        key = next(iter(delta.insertions[0].inserted_keys))
        ids = out.provenance[key]
        assert len(ids) == 1 and is_synthetic_id(ids[0])

    def test_insertion_into_occupied_merges_ids(self):
        scene = grid_scene(2)
        db = PatchDatabase({"p0": single_point_patch()})
        delta = insert_patch(scene, db, "p0", (0.1, 0.1), 0.0, flat_ground())
        key = next(iter(delta.insertions[0].inserted_keys))
        assert key in scene.key_set()
        out = apply_delta(scene, delta)
        original = set(scene.provenance[key])
        assert original < set(out.provenance[key])

    def test_sequential_equals_merged(self):
        rng = np.random.default_rng(12)
        scene = grid_scene(5)
        db = PatchDatabase({"p0": single_point_patch()})
        for _ in range(10):
            lo = rng.uniform(-0.1, 0.9, 3)
            d1 = delete_by_selection(scene, BoxRegion(lo, lo + rng.uniform(0.2, 0.6, 3)))
            s1 = apply_delta(scene, d1)
            d2 = insert_patch(s1, db, "p0", tuple(rng.uniform(0, 1, 2)), 0.0, flat_ground())
            s2 = apply_delta(s1, d2)
            merged = merge_deltas(scene, d1, d2)
            direct = apply_delta(scene, merged)
            assert direct.key_set() == s2.key_set()
            assert direct == s2

    def test_merged_handles_insert_then_remove_overlap(self):
        # Insert over an occupied voxel, then remove that voxel again: the
        # merged delta must drop it, exactly like sequential application.
        scene = grid_scene(3)
        db = PatchDatabase({"p0": single_point_patch()})
        d1 = insert_patch(scene, db, "p0", (0.1, 0.1), 0.0, flat_ground())
        key = next(iter(d1.insertions[0].inserted_keys))
        s1 = apply_delta(scene, d1)
        d2 = delete_by_selection(
            s1, BoxRegion(np.array(key) * 0.2 - 0.01, (np.array(key) + 1) * 0.2 + 0.01)
        )
        assert key in d2.removed_keys
        s2 = apply_delta(s1, d2)
        merged = merge_deltas(scene, d1, d2)
        assert apply_delta(scene, merged).key_set() == s2.key_set()


class TestVarints:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=-(2**40), max_value=2**40))
    def test_zigzag_round_trip(self, n):
        assert _unzigzag(_zigzag(n)) == n
        assert _zigzag(n) >= 0

    @settings(max_examples=100, deadline=None)
    @given(
        st.sets(
            st.tuples(
                st.integers(-50000, 50000),
                st.integers(-50000, 50000),
                st.integers(-50000, 50000),
            ),
            max_size=60,
        )
    )
    def test_key_block_round_trip(self, keys):
        blob = _encode_key_set(keys)
        decoded, pos = _decode_key_set(blob, 0)
        assert decoded == frozenset(keys)
        assert pos == len(blob)


class TestPortableArchive:
    def make_scene_and_delta(self, seed=0, n=8):
        rng = np.random.default_rng(seed)
        scene = grid_scene(n)
        db = PatchDatabase({"p0": single_point_patch()})
        d1 = delete_by_selection(scene, BoxRegion(rng.uniform(0, 0.4, 3), rng.uniform(0.8, 1.4, 3)))
        s1 = apply_delta(scene, d1)
        d2 = insert_patch(s1, db, "p0", (9.0, 9.0), 0.3, flat_ground())
        return scene, merge_deltas(scene, d1, d2)

    def test_round_trip_exact(self, tmp_path):
        scene, delta = self.make_scene_and_delta()
        path = tmp_path / "a.pcme"
        export_portable(scene, [delta], path)
        scenes = import_portable(path, scene)
        assert len(scenes) == 1
        assert scenes[0] == apply_delta(scene, delta)
        _, deltas = read_portable(path)
        assert deltas[0].removed_keys == delta.removed_keys
        assert deltas[0].insertions == delta.insertions

    def test_zero_deltas(self, tmp_path):
        scene = grid_scene(3)
        path = tmp_path / "b.pcme"
        export_portable(scene, [], path)
        assert import_portable(path, scene) == []

    def test_reexport_byte_identical(self, tmp_path):
        scene, delta = self.make_scene_and_delta()
        blob = archive_bytes(scene, [delta])
        fp, deltas = parse_archive(blob)
        assert archive_bytes(fp, deltas) == blob

    def test_corrupt_archive_rejected(self, tmp_path):
        scene, delta = self.make_scene_and_delta()
        blob = bytearray(archive_bytes(scene, [delta]))
        blob[10] ^= 0xFF
        with pytest.raises(ValueError, match="portable archive corrupt"):
            parse_archive(bytes(blob))
        with pytest.raises(ValueError, match="portable archive corrupt"):
            parse_archive(b"NOPE")

    def test_wrong_base_rejected(self, tmp_path):
        scene, delta = self.make_scene_and_delta()
        path = tmp_path / "c.pcme"
        export_portable(scene, [delta], path)
        with pytest.raises(ValueError, match="does not target this scene"):
            import_portable(path, grid_scene(4))

    def test_foreign_delta_refused_at_export(self, tmp_path):
        scene, delta = self.make_scene_and_delta()
        with pytest.raises(ValueError, match="must target the base"):
            export_portable(grid_scene(4), [delta], tmp_path / "d.pcme")

    def test_compression_on_sparse_edits(self):
        # >= 100k voxels, delta touching <= 5%: archive <= 10% of native dump.
        scene = grid_scene(47)  # 47^3 = 103,823 voxels
        assert scene.num_voxels >= 100_000
        delta = delete_by_selection(scene, BoxRegion((0, 0, 0), (3.4, 0.41, 0.41)))
        touched = len(delta.removed_keys)
        assert 0 < touched <= 0.05 * scene.num_voxels
        blob = archive_bytes(scene, [delta])
        native = scene_to_bytes(scene)
        assert len(blob) <= 0.10 * len(native)
