import numpy as np
import pytest

from planarmatch import evaluation as ev
from planarmatch import geometry as geo
from planarmatch import scene as sc
from planarmatch.errors import EstimationFailed


def rotation_z(deg):
    r = np.deg2rad(deg)
    return np.array(
        [[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1.0]]
    )


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0, np.pi)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * kx + (1 - np.cos(ang)) * (kx @ kx)


def perfect_matches(scene, stride=8):
    field = sc.project_correspondences(scene, stride=stride)
    ok = field.valid.ravel()
    src = field.source_coords().reshape(-1, 2)[ok]
    tgt = field.target.reshape(-1, 2)[ok]
    return src, tgt


class TestPoseError:
    def test_identical_poses(self):
        est = ev.PoseEstimate(np.eye(3), np.array([0, 0, 1.0]), 10, True)
        gt = geo.CameraPose(R=np.eye(3), t=[0, 0, 1.0])
        rot, trans = ev.pose_error(est, gt)
        assert rot == pytest.approx(0.0, abs=1e-9)
        assert trans == pytest.approx(0.0, abs=1e-7)

    def test_ten_degree_rotation(self):
        est = ev.PoseEstimate(rotation_z(10.0), np.array([0, 0, 1.0]), 10, True)
        gt = geo.CameraPose(R=np.eye(3), t=[0, 0, 1.0])
        rot, _ = ev.pose_error(est, gt)
        assert rot == pytest.approx(10.0, abs=1e-9)

    def test_orthogonal_translations(self):
        est = ev.PoseEstimate(np.eye(3), np.array([0, 1.0, 0]), 10, True)
        gt = geo.CameraPose(R=np.eye(3), t=[1.0, 0, 0])
        _, trans = ev.pose_error(est, gt)
        assert trans == pytest.approx(90.0, abs=1e-9)

    def test_translation_sign_invariance(self):
        est = ev.PoseEstimate(np.eye(3), np.array([-1.0, 0, 0]), 10, True)
        gt = geo.CameraPose(R=np.eye(3), t=[1.0, 0, 0])
        _, trans = ev.pose_error(est, gt)
        assert trans == pytest.approx(0.0, abs=1e-7)

    def test_identity_property_random_poses(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r = random_rotation(rng)
            t = rng.normal(size=3)
            est = ev.PoseEstimate(r, t / np.linalg.norm(t), 10, True)
            rot, trans = ev.pose_error(est, geo.CameraPose(R=r, t=t))
            assert rot < 1e-5 and trans < 1e-5  # arccos noise near trace 3


class TestAuc:
    def test_all_zero(self):
        for thr in (5.0, 10.0, 20.0):
            assert ev.auc([0.0] * 7, thr) == pytest.approx(1.0)

    def test_half_failures(self):
        for thr in (5.0, 10.0, 20.0):
            assert ev.auc([0.0, np.inf], thr) == pytest.approx(0.5)

    def test_single_midpoint_error(self):
        assert ev.auc([2.5], 5.0) == pytest.approx(0.5)

    def test_empty(self):
        assert ev.auc([], 5.0) == 0.0

    def test_monotone_and_permutation_invariant(self):
        rng = np.random.default_rng(1)
        errs = rng.uniform(0, 10, 50)
        base = ev.auc(errs, 5.0)
        assert ev.auc(rng.permutation(errs), 5.0) == pytest.approx(base)
        assert ev.auc(errs * 0.5, 5.0) >= base


class TestCornerError:
    def test_identical(self):
        assert ev.corner_error(np.eye(3), np.eye(3), (640, 480)) == 0.0

    def test_one_pixel_translation(self):
        h = np.array([[1, 0, 1.0], [0, 1, 0], [0, 0, 1]])
        assert ev.corner_error(h, np.eye(3), (640, 480)) == pytest.approx(1.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            h1 = np.eye(3) + rng.normal(scale=0.01, size=(3, 3))
            h2 = np.eye(3) + rng.normal(scale=0.01, size=(3, 3))
            h1[2, 2] = h2[2, 2] = 1.0
            got = ev.corner_error(h1, h2, (64, 48))
            corners = np.array([[0, 0], [64, 0], [64, 48], [0, 48]], dtype=float)
            expected = np.mean(
                [
                    np.linalg.norm(geo.apply_homography(h1, c) - geo.apply_homography(h2, c))
                    for c in corners
                ]
            )
            assert got == pytest.approx(expected, rel=1e-12)
            assert ev.corner_error(h2, h1, (64, 48)) == pytest.approx(got, rel=1e-12)

    def test_point_at_infinity(self):
        # w vanishes exactly at the (640, 0) and (640, 480) corners
        h = np.array([[1, 0, 0], [0, 1, 0], [-1 / 640.0, 0, 1.0]])
        assert ev.corner_error(h, np.eye(3), (640, 480)) == np.inf


class TestPointAccuracy:
    def test_exact_and_off(self):
        scene = sc.generate_scene(seed=1, n_planes=2)
        field = sc.project_correspondences(scene, stride=8)
        ok = field.valid.ravel()
        src = field.source_coords().reshape(-1, 2)[ok][:100]
        tgt = field.target.reshape(-1, 2)[ok][:100]
        assert ev.point_accuracy(src, tgt, field, 1.0) == 1.0
        assert ev.point_accuracy(src, tgt + 2.0, field, 1.0) == 0.0

    def test_no_valid_warns(self):
        scene = sc.generate_scene(seed=1, n_planes=2)
        field = sc.project_correspondences(scene, stride=8)
        bad = np.nonzero(~field.valid)
        src = np.array([[bad[1][0] * 8.0, bad[0][0] * 8.0]])
        with pytest.warns(UserWarning):
            assert ev.point_accuracy(src, src, field, 1.0) == 0.0

    def test_mixed_brute_force(self):
        scene = sc.generate_scene(seed=4, n_planes=2)
        field = sc.project_correspondences(scene, stride=8)
        ok = field.valid.ravel()
        src = field.source_coords().reshape(-1, 2)[ok][:200]
        tgt = field.target.reshape(-1, 2)[ok][:200].copy()
        rng = np.random.default_rng(3)
        off = rng.uniform(0, 2, size=(200, 2))
        tgt += off
        expected = np.mean(np.linalg.norm(off, axis=1) <= 1.0)
        assert ev.point_accuracy(src, tgt, field, 1.0) == pytest.approx(expected)


class TestEstimateRelativePose:
    def test_perfect_matches(self):
        scene = sc.generate_scene(seed=5, n_planes=3)
        src, tgt = perfect_matches(scene)
        est = ev.estimate_relative_pose(
            src, tgt, scene.cam1.intrinsics, scene.cam2.intrinsics, 0.25, seed=1
        )
        rot, trans = ev.pose_error(est, scene.cam2.pose)
        assert rot < 0.1
        assert trans < 0.5
        assert not est.translation_degenerate

    def test_pure_rotation_flagged(self):
        scene = sc.generate_scene(seed=2, n_planes=2, baseline_scale=0.0)
        assert np.linalg.norm(scene.cam2.pose.t) == 0.0
        src, tgt = perfect_matches(scene)
        est = ev.estimate_relative_pose(
            src, tgt, scene.cam1.intrinsics, scene.cam2.intrinsics, 0.25, seed=1
        )
        assert est.translation_degenerate
        rot, trans = ev.pose_error(est, scene.cam2.pose)
        assert rot < 0.5
        assert trans == 0.0  # unmeasurable against a zero baseline

    def test_too_few_matches(self):
        scene = sc.generate_scene(seed=5, n_planes=3)
        src, tgt = perfect_matches(scene)
        with pytest.raises(EstimationFailed):
            ev.estimate_relative_pose(
                src[:7], tgt[:7], scene.cam1.intrinsics, scene.cam2.intrinsics, 0.25, seed=1
            )

    def test_deterministic_per_seed(self):
        scene = sc.generate_scene(seed=6, n_planes=3)
        src, tgt = perfect_matches(scene)
        rng = np.random.default_rng(0)
        noisy = tgt + rng.normal(scale=0.5, size=tgt.shape)
        a = ev.estimate_relative_pose(src, noisy, scene.cam1.intrinsics, scene.cam2.intrinsics, 1.0, seed=9)
        b = ev.estimate_relative_pose(src, noisy, scene.cam1.intrinsics, scene.cam2.intrinsics, 1.0, seed=9)
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.t_dir, b.t_dir)
        assert a.inliers == b.inliers


class TestRansacHomography:
    def test_recovers_plane_homography(self):
        scene = sc.generate_scene(seed=0, n_planes=1)
        src, tgt = perfect_matches(scene)
        h = ev.ransac_homography(src, tgt, threshold_px=0.25, seed=2)
        assert ev.corner_error(h, scene.plane_homographies()[0], scene.image_size) < 1e-4

    def test_too_few(self):
        with pytest.raises(EstimationFailed):
            ev.ransac_homography(np.zeros((3, 2)), np.zeros((3, 2)))
