import numpy as np
import pytest

from planarmatch import geometry as geo
from planarmatch import scene as sc
from planarmatch.config import RunConfig, VARIANTS
from planarmatch.evaluation import evaluate_output, run_ablation
from planarmatch.pipeline import PipelineOutput, prepare_bundle, run_variant, supervision_losses


@pytest.fixture(scope="module")
def noisefree_bundle():
    cfg = RunConfig(noise_sigma=0.0, seed=3)
    scene = sc.generate_scene(seed=3, n_planes=3, baseline_scale=cfg.baseline_scale)
    return scene, prepare_bundle(scene, cfg), cfg


class TestVariants:
    def test_base32_no_h_emits_unit_centers(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        out = run_variant(bundle, "base32_no_H", cfg)
        # sources are 1/32 cell centers, targets are matched cell centers
        assert np.all((out.p_s - 16.0) % 32.0 == 0.0)
        assert np.all((out.p_t - 16.0) % 32.0 == 0.0)

    def test_base32_with_h_emits_virtual_corners(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        out = run_variant(bundle, "base32_with_H", cfg)
        n_valid = sum(
            1
            for i, a in enumerate(bundle.grid.attrs)
            if a is not None and bundle.grid.homography(i) is not None
        )
        kept = out.p_s.shape[0] + out.stats.get("below_min_confidence", 0)
        assert kept == 4 * n_valid
        # source corners sit one pixel off the cell centers (32k + 16 +- 1)
        offsets = (out.p_s - 16.0) % 32.0
        assert np.all(np.isin(offsets, (1.0, 31.0)))

    def test_refined_variants_use_eighth_centers(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        for variant in ("no_segmentation", "full"):
            out = run_variant(bundle, variant, cfg)
            assert out.p_s.shape[0] > 1000
            assert np.all((out.p_s - 4.0) % 8.0 == 0.0)
            assert out.counter.queries == out.stats["refined"]
            assert out.counter.inner_products <= 49 * out.stats["refined"]

    def test_unknown_variant_rejected(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        with pytest.raises(ValueError):
            run_variant(bundle, "bogus", cfg)

    def test_run_variant_deterministic(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        a = run_variant(bundle, "full", cfg)
        b = run_variant(bundle, "full", cfg)
        assert np.array_equal(a.p_s, b.p_s)
        assert np.array_equal(a.p_t, b.p_t)
        assert np.array_equal(a.confidence, b.confidence)

    def test_confidence_floor_respected(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        out = run_variant(bundle, "full", cfg)
        assert np.all(out.confidence >= cfg.min_confidence)


class TestEndToEnd:
    def test_single_plane_noise_free_accuracy(self):
        cfg = RunConfig(noise_sigma=0.0, n_planes=1, seed=0)
        scene = sc.generate_scene(seed=0, n_planes=1, baseline_scale=cfg.baseline_scale)
        bundle = prepare_bundle(scene, cfg)
        out = run_variant(bundle, "full", cfg)
        row = evaluate_output(scene, out, cfg)
        assert row["point_accuracy"] >= 0.95
        assert row["median_endpoint_px"] < 0.5

    def test_ordering_on_two_seeds(self):
        cfg = RunConfig()
        reports, rows = run_ablation([0, 1], cfg)
        med = {v: reports[v].median_endpoint_px for v in VARIANTS}
        assert med["base32_no_H"] > med["base32_with_H"]
        assert med["base32_with_H"] >= med["full"]
        assert med["full"] <= med["no_segmentation"]

    def test_gt_hypothesis_source(self):
        cfg = RunConfig(noise_sigma=0.0, hypothesis_source="ground_truth", seed=2)
        scene = sc.generate_scene(seed=2, n_planes=2, baseline_scale=cfg.baseline_scale)
        bundle = prepare_bundle(scene, cfg)
        out = run_variant(bundle, "base32_with_H", cfg)
        gt, _, ok = sc.correspondences_at(scene, out.p_s)
        err = np.linalg.norm(out.p_t[ok] - gt[ok], axis=1)
        # exact hypotheses reproduce the plane maps up to the linearization
        assert np.median(err) < 0.05


class TestSupervisionLosses:
    def test_losses_finite_and_nonnegative(self, noisefree_bundle):
        scene, bundle, cfg = noisefree_bundle
        out = run_variant(bundle, "full", cfg)
        losses = supervision_losses(bundle, out, cfg)
        for key in ("coarse_loss", "segmentation_focal_loss", "refinement_loss"):
            assert np.isfinite(losses[key])
            assert losses[key] >= 0.0
        assert losses["q1_units"] + losses["q2_units"] > 0

    def test_exact_run_has_small_refinement_loss(self):
        cfg = RunConfig(noise_sigma=0.0, hypothesis_source="ground_truth", seed=1)
        scene = sc.generate_scene(seed=1, n_planes=1, baseline_scale=cfg.baseline_scale)
        bundle = prepare_bundle(scene, cfg)
        out = run_variant(bundle, "full", cfg)
        losses = supervision_losses(bundle, out, cfg)
        # endpoint term ~0.2 px and confident inliers
        assert losses["refinement_loss"] < 1.0
