import os

import numpy as np
import pytest

from planarmatch import geometry as geo
from planarmatch import hypotheses as hyp
from planarmatch import scene as sc
from planarmatch import storage
from planarmatch.evaluation import MetricReport
from planarmatch.segmentation import SegmentationMap


@pytest.fixture(scope="module")
def scene():
    return sc.generate_scene(seed=3, n_planes=3)


class TestSceneJson:
    def test_round_trip(self, scene):
        back = storage.scene_from_json(storage.scene_to_json(scene))
        assert back.image_size == scene.image_size
        assert np.array_equal(back.cam2.pose.R, scene.cam2.pose.R)
        assert np.array_equal(back.cam2.pose.t, scene.cam2.pose.t)
        assert len(back.planes) == len(scene.planes)
        for a, b in zip(scene.planes, back.planes):
            assert np.array_equal(a.polygon, b.polygon)

    def test_byte_deterministic(self, scene):
        assert storage.scene_to_json(scene) == storage.scene_to_json(scene)

    def test_version_guard(self, scene):
        text = storage.scene_to_json(scene).replace('"format_version": 1', '"format_version": 99')
        with pytest.raises(ValueError):
            storage.scene_from_json(text)

    def test_file_round_trip(self, scene, tmp_path):
        path = str(tmp_path / "scene.json")
        storage.save_scene(scene, path)
        back = storage.load_scene(path)
        assert np.array_equal(back.planes[0].polygon, scene.planes[0].polygon)


class TestFieldContainer:
    def test_round_trip(self, scene, tmp_path):
        field = sc.project_correspondences(scene, stride=8)
        path = str(tmp_path / "field.bin")
        storage.save_field(field, path)
        back = storage.load_field(path)
        assert back.stride == 8
        assert back.image_size == scene.image_size
        assert np.array_equal(back.valid, field.valid)
        assert np.array_equal(back.plane_id, field.plane_id)
        # float32 storage keeps targets to a few 1e-5 px at image scale
        diff = np.abs(back.target[field.valid] - field.target[field.valid])
        assert np.max(diff) < 1e-3

    def test_header_is_32_bytes_little_endian(self, scene):
        field = sc.project_correspondences(scene, stride=32)
        data = storage.field_to_bytes(field)
        assert data[:4] == b"PWBC"
        assert int.from_bytes(data[4:6], "little") == 1
        gh, gw = field.grid_shape
        assert len(data) == 32 + gh * gw * 16

    def test_wrong_kind_rejected(self, scene):
        field = sc.project_correspondences(scene, stride=32)
        with pytest.raises(ValueError):
            storage.matches_from_bytes(storage.field_to_bytes(field))


class TestHypothesisGridContainer:
    def test_round_trip(self, scene, tmp_path):
        pyramid = hyp.PyramidConfig(scene.image_size)
        grid = hyp.build_hypothesis_grid_from_gt(scene, pyramid)
        path = str(tmp_path / "grid.bin")
        storage.save_hypothesis_grid(grid, scene.image_size, path)
        back = storage.load_hypothesis_grid(path)
        assert back.grid_size == grid.grid_size
        for a, b in zip(grid.attrs, back.attrs):
            assert (a is None) == (b is None)
            if a is not None:
                assert np.allclose(b.as_vector(), a.as_vector(), atol=1e-4)
                assert b.c == 1.0  # confidence is not part of the 10-float record

    def test_record_is_ten_floats_plus_byte(self, scene):
        pyramid = hyp.PyramidConfig(scene.image_size)
        grid = hyp.build_hypothesis_grid_from_gt(scene, pyramid)
        data = storage.hypothesis_grid_to_bytes(grid, scene.image_size)
        gw, gh = grid.grid_size
        assert len(data) == 32 + gw * gh * 41


class TestSegmentationMapContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        choice = rng.integers(0, 10, size=(6, 8)).astype(np.uint8)
        smap = SegmentationMap(
            grid_size=(8, 6),
            choice=choice,
            global_ref=np.zeros((6, 8), np.int32),
            valid=choice > 0,
        )
        path = str(tmp_path / "seg.bin")
        storage.save_segmentation_map(smap, (64, 48), path)
        back = storage.load_segmentation_map(path)
        assert np.array_equal(back.choice, choice)
        assert np.array_equal(back.valid, choice > 0)


class TestMatches:
    def test_text_round_trip(self):
        rng = np.random.default_rng(1)
        p_s = rng.uniform(0, 640, (20, 2))
        p_t = rng.uniform(0, 640, (20, 2))
        conf = rng.uniform(0, 1, 20)
        back_s, back_t, back_c = storage.matches_from_text(
            storage.matches_to_text(p_s, p_t, conf)
        )
        assert np.array_equal(back_s, p_s)  # repr round-trips float64 exactly
        assert np.array_equal(back_t, p_t)
        assert np.array_equal(back_c, conf)

    def test_binary_round_trip(self):
        rng = np.random.default_rng(2)
        p_s = rng.uniform(0, 640, (15, 2))
        p_t = rng.uniform(0, 640, (15, 2))
        conf = rng.uniform(0, 1, 15)
        back_s, back_t, back_c = storage.matches_from_bytes(
            storage.matches_to_bytes(p_s, p_t, conf, (640, 480))
        )
        assert np.max(np.abs(back_s - p_s)) < 1e-4
        assert np.max(np.abs(back_c - conf)) < 1e-6

    def test_save_both(self, tmp_path):
        storage.save_matches(
            np.zeros((3, 2)), np.ones((3, 2)), np.full(3, 0.5),
            str(tmp_path / "m.txt"), str(tmp_path / "m.bin"), (64, 64),
        )
        assert os.path.exists(tmp_path / "m.txt")
        assert os.path.exists(tmp_path / "m.bin")


class TestReports:
    def test_report_text_renders_all_fields(self):
        report = MetricReport(variant="full", n_scenes=2, auc5=0.5, median_endpoint_px=1.25)
        text = storage.report_to_text(report, {"stages": {"refined": 10}})
        assert "variant = full" in text
        assert "auc5 = 0.5" in text
        assert "corner_frac_1px =" in text  # None renders as empty
        assert "[stages]" in text
        assert "refined = 10" in text

    def test_metrics_csv_stable_columns(self):
        rows = [
            {"seed": 0, "variant": "full", "median_endpoint_px": 0.5, "corner_error_px": None},
            {"seed": 1, "variant": "base32_no_H", "median_endpoint_px": 9.0, "corner_error_px": 2.0},
        ]
        text = storage.metrics_csv(rows)
        lines = text.splitlines()
        assert lines[0].startswith("seed,variant,")
        assert lines[1].split(",")[1] == "full"
        assert lines[1].endswith(",")  # None corner error stays empty


class TestAtomicWrite:
    def test_no_partial_files(self, tmp_path):
        path = str(tmp_path / "x" / "y.bin")
        storage.atomic_write_bytes(path, b"hello")
        with open(path, "rb") as handle:
            assert handle.read() == b"hello"
        leftovers = [p for p in os.listdir(tmp_path / "x") if p.startswith(".tmp-")]
        assert leftovers == []
