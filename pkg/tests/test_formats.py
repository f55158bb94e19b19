"""File formats: binary PLY, pose lists, PNG masks, atomic writes."""

from __future__ import annotations

import os

import numpy as np
import pytest

from pcm_toolkit.formats import (
    mask_png_bytes,
    ply_bytes,
    read_mask_png,
    read_ply,
    read_ply_columns,
    read_poses,
    write_mask_png,
    write_ply,
    write_poses,
)
from pcm_toolkit.geometry import PointCloud, RigidTransform


class TestPly:
    def test_round_trip_with_ids(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.uniform(-10, 10, (100, 3)), np.arange(100, dtype=np.uint64) * 7)
        path = tmp_path / "c.ply"
        write_ply(path, cloud)
        back = read_ply(path)
        assert back == cloud

    def test_round_trip_without_ids(self, tmp_path):
        cloud = PointCloud(np.array([[1.5, -2.25, 3.125]]))
        path = tmp_path / "c.ply"
        write_ply(path, cloud)
        back = read_ply(path)
        assert back.ids is None
        assert np.array_equal(back.points, cloud.points)

    def test_extra_columns_round_trip(self, tmp_path):
        cloud = PointCloud(np.array([[0.0, 0, 0], [1.0, 1, 1]]))
        extra = {
            "u": np.array([10.5, 20.5]),
            "v": np.array([1.5, 2.5]),
            "image_index": np.array([0, 3], dtype=np.uint32),
        }
        path = tmp_path / "pred.ply"
        write_ply(path, cloud, extra=extra)
        cols = read_ply_columns(path)
        assert np.array_equal(cols["u"], extra["u"])
        assert cols["image_index"].dtype == np.dtype("<u4")

    def test_header_declares_doubles_and_uint64(self, tmp_path):
        cloud = PointCloud(np.zeros((1, 3)), np.array([4], dtype=np.uint64))
        blob = ply_bytes({"x": cloud.points[:, 0], "y": cloud.points[:, 1],
                          "z": cloud.points[:, 2], "id": cloud.ids})
        header = blob.split(b"end_header")[0].decode()
        assert "format binary_little_endian 1.0" in header
        assert "property double x" in header
        assert "property uint64 id" in header

    def test_truncated_payload_rejected(self, tmp_path):
        cloud = PointCloud(np.zeros((4, 3)))
        path = tmp_path / "c.ply"
        write_ply(path, cloud)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(ValueError, match="truncated"):
            read_ply(path)

    def test_non_ply_rejected(self, tmp_path):
        path = tmp_path / "nope.ply"
        path.write_bytes(b"garbage")
        with pytest.raises(ValueError, match="not a PLY"):
            read_ply(path)


class TestPoses:
    def test_round_trip(self, tmp_path):
        entries = [
            (123456789, RigidTransform.about_z(0.8, (1.25, -2.5, 0.125))),
            (987654321, RigidTransform.about_z(-2.1, (0.0, 4.0, -1.0))),
        ]
        path = tmp_path / "poses.txt"
        write_poses(path, entries)
        back = read_poses(path)
        assert len(back) == 2
        for (ts_a, pose_a), (ts_b, pose_b) in zip(entries, back):
            assert ts_a == ts_b
            assert np.allclose(pose_a.rotation, pose_b.rotation, atol=1e-12)
            assert np.allclose(pose_a.translation, pose_b.translation, atol=1e-12)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(ValueError, match="malformed pose line"):
            read_poses(path)


class TestMaskPng:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        raster = rng.random((24, 32)) > 0.6
        path = tmp_path / "m.png"
        write_mask_png(path, raster)
        assert np.array_equal(read_mask_png(path), raster)

    def test_values_are_0_and_255(self, tmp_path):
        from PIL import Image

        raster = np.zeros((4, 4), bool)
        raster[1, 2] = True
        path = tmp_path / "m.png"
        write_mask_png(path, raster)
        with Image.open(path) as img:
            arr = np.asarray(img)
        assert arr.dtype == np.uint8
        assert set(np.unique(arr)) == {0, 255}

    def test_deterministic_bytes(self):
        raster = np.eye(16, dtype=bool)
        assert mask_png_bytes(raster) == mask_png_bytes(raster)


class TestAtomicity:
    def test_write_creates_directories(self, tmp_path):
        path = tmp_path / "deep" / "dir" / "cloud.ply"
        write_ply(path, PointCloud(np.zeros((1, 3))))
        assert path.exists()

    def test_no_temp_files_left(self, tmp_path):
        path = tmp_path / "cloud.ply"
        write_ply(path, PointCloud(np.zeros((1, 3))))
        leftovers = [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]
        assert leftovers == []
