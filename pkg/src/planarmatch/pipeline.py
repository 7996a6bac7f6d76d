"""End-to-end matching pipeline over synthetic scenes, with ablation variants.

Variants:

- base32_no_H: coarse matches only, target quantized to the matched unit
  center (translation-only hypotheses).
- base32_with_H: the four virtual-corner correspondences of every valid
  hypothesis.
- no_segmentation: every 1/8 unit uses its containing cell's hypothesis
  (the center of its neighborhood), then refinement.
- full: segmentation reassignment, then refinement.

A SceneBundle carries everything the variants share (descriptors, coarse
matches, the hypothesis grid), so ablations run all variants against
identical inputs and seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import hypotheses as hyp
from . import refinement as rf
from . import segmentation as seg
from .config import RunConfig, derive_seed
from .geometry import BASE_QUAD, apply_homography_masked
from .scene import PlanarScene, correspondences_at, synth_descriptors


@dataclass
class SceneBundle:
    scene: PlanarScene
    pyramid: hyp.PyramidConfig
    desc32: tuple
    desc8: tuple
    desc2: tuple
    coarse: list
    grid: hyp.HypothesisGrid


@dataclass
class PipelineOutput:
    variant: str
    p_s: np.ndarray  # (N, 2)
    p_t: np.ndarray  # (N, 2) final target positions
    confidence: np.ndarray  # (N,)
    counter: rf.AttentionCostCounter
    stats: dict = field(default_factory=dict)
    wall_time_s: float = 0.0


def prepare_bundle(scene: PlanarScene, cfg: RunConfig) -> SceneBundle:
    """Descriptors at all levels, coarse matches and the hypothesis grid."""
    pyramid = hyp.PyramidConfig(scene.image_size)
    root = cfg.seed
    desc32 = synth_descriptors(
        scene, 32, cfg.descriptor_dim, cfg.noise_sigma, derive_seed(root, "desc32")
    )
    desc8 = synth_descriptors(
        scene, 8, cfg.descriptor_dim, cfg.noise_sigma, derive_seed(root, "desc8")
    )
    desc2 = synth_descriptors(
        scene, 2, cfg.descriptor_dim, cfg.noise_sigma, derive_seed(root, "desc2")
    )
    coarse = hyp.coarse_match(desc32[0], desc32[1])
    if cfg.hypothesis_source == "ground_truth":
        grid = hyp.build_hypothesis_grid_from_gt(scene, pyramid)
    else:
        grid = hyp.build_hypothesis_grid_from_matches(
            coarse,
            desc32[0],
            desc32[1],
            pyramid,
            groups=cfg.groups,
            loc_temperature=cfg.loc_temperature,
        )
    return SceneBundle(scene, pyramid, desc32, desc8, desc2, coarse, grid)


def _segmentation_map(bundle: SceneBundle, cfg: RunConfig) -> seg.SegmentationMap:
    if cfg.seg_mode == "oracle":
        centers8 = bundle.pyramid.cell_centers(8).reshape(-1, 2)
        gt_tgt, _, ok = correspondences_at(bundle.scene, centers8)
        return seg.segment(
            bundle.grid,
            bundle.desc8[0],
            bundle.pyramid,
            mode="oracle",
            gt_targets=gt_tgt,
            gt_valid=ok,
        )
    if cfg.seg_mode == "embedding":
        pos = seg.make_positional_table(cfg.descriptor_dim, derive_seed(cfg.seed, "pos"))
        proj = seg.make_projection(
            cfg.descriptor_dim, cfg.descriptor_dim, derive_seed(cfg.seed, "proj")
        )
        return seg.segment(
            bundle.grid,
            bundle.desc8[0],
            bundle.pyramid,
            mode="embedding",
            desc_src32=bundle.desc32[0],
            proj=proj,
            pos=pos,
        )
    return seg.segment(
        bundle.grid,
        bundle.desc8[0],
        bundle.pyramid,
        mode="consistency",
        desc_tgt8=bundle.desc8[1],
    )


def _refined_variant(bundle: SceneBundle, cfg: RunConfig, use_segmentation: bool):
    """Candidates per 1/8 unit, hypothesis projection, one refinement pass."""
    pyramid = bundle.pyramid
    grid = bundle.grid
    gw8, gh8 = pyramid.grid_size(8)
    gw32 = grid.grid_size[0]
    centers8 = pyramid.cell_centers(8).reshape(-1, 2)
    w, h = pyramid.image_size
    stats = {"units": gw8 * gh8, "no_hypothesis": 0, "target_out_of_bounds": 0}

    if use_segmentation:
        smap = _segmentation_map(bundle, cfg)
        owners = smap.global_ref.reshape(-1).astype(int)
        owners[~smap.valid.reshape(-1)] = -1
    else:
        jy, jx = np.divmod(np.arange(gw8 * gh8), gw8)
        owners = (jy // 4) * gw32 + (jx // 4)

    # project all unit centers, batched per distinct hypothesis owner
    p_t_all = np.full((gw8 * gh8, 2), np.nan)
    usable = np.zeros(gw8 * gh8, dtype=bool)
    for owner in np.unique(owners):
        if owner < 0:
            continue
        h_o = grid.homography(int(owner))
        if h_o is None:
            continue
        members = np.nonzero(owners == owner)[0]
        proj, ok = apply_homography_masked(h_o, centers8[members])
        p_t_all[members] = proj
        usable[members] = ok

    in_bounds = (
        usable
        & (p_t_all[:, 0] >= 0)
        & (p_t_all[:, 0] < w)
        & (p_t_all[:, 1] >= 0)
        & (p_t_all[:, 1] < h)
    )
    stats["no_hypothesis"] = int((~usable).sum())
    stats["target_out_of_bounds"] = int((usable & ~in_bounds).sum())

    counter = rf.AttentionCostCounter()
    if not np.any(in_bounds):
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), counter, stats
    p_s = centers8[in_bounds]
    p_t = p_t_all[in_bounds]
    rcfg = rf.RefineConfig(
        window_radius=cfg.window_radius,
        temperature=cfg.attn_temperature,
        confidence_gain=cfg.confidence_gain,
        confidence_midpoint=cfg.confidence_midpoint,
    )
    p_t_star, conf, kept = rf.refine_batch(
        p_s, p_t, bundle.desc2[0], bundle.desc2[1], rcfg, counter
    )
    stats["window_out_of_bounds"] = int((~kept).sum())
    stats["refined"] = int(kept.sum())
    return p_s[kept], p_t_star[kept], conf[kept], counter, stats


def run_variant(bundle: SceneBundle, variant: str, cfg: RunConfig) -> PipelineOutput:
    """Execute one ablation variant against a prepared scene bundle."""
    t0 = time.perf_counter()
    pyramid = bundle.pyramid
    counter = rf.AttentionCostCounter()
    stats: dict = {}

    if variant == "base32_no_H":
        centers32 = pyramid.cell_centers(32).reshape(-1, 2)
        p_s = centers32
        p_t = np.array(
            [((m.target_cell[0] + 0.5) * 32.0, (m.target_cell[1] + 0.5) * 32.0) for m in bundle.coarse]
        )
        conf = np.clip([m.score for m in bundle.coarse], 0.0, 1.0)
        stats = {"units": len(bundle.coarse)}

    elif variant == "base32_with_H":
        p_s_list, p_t_list, conf_list = [], [], []
        invalid = 0
        for i, attrs in enumerate(bundle.grid.attrs):
            h_i = bundle.grid.homography(i)
            if attrs is None or h_i is None:
                invalid += 1
                continue
            corners_s = BASE_QUAD + attrs.p_s
            corners_t, ok = apply_homography_masked(h_i, corners_s)
            if not ok.all():
                invalid += 1
                continue
            p_s_list.append(corners_s)
            p_t_list.append(corners_t)
            conf_list.extend([attrs.c] * 4)
        p_s = np.concatenate(p_s_list) if p_s_list else np.zeros((0, 2))
        p_t = np.concatenate(p_t_list) if p_t_list else np.zeros((0, 2))
        conf = np.array(conf_list)
        stats = {"units": bundle.grid.n_units, "invalid_hypotheses": invalid}

    elif variant in ("no_segmentation", "full"):
        p_s, p_t, conf, counter, stats = _refined_variant(
            bundle, cfg, use_segmentation=(variant == "full")
        )

    else:
        raise ValueError(f"unknown variant {variant!r}")

    p_s = np.asarray(p_s, dtype=float).reshape(-1, 2)
    p_t = np.asarray(p_t, dtype=float).reshape(-1, 2)
    conf = np.asarray(conf, dtype=float).reshape(-1)
    # only matches the confidence head calls reliable are emitted
    keep = conf >= cfg.min_confidence
    stats["below_min_confidence"] = int((~keep).sum())
    return PipelineOutput(
        variant=variant,
        p_s=p_s[keep],
        p_t=p_t[keep],
        confidence=conf[keep],
        counter=counter,
        stats=stats,
        wall_time_s=time.perf_counter() - t0,
    )


def supervision_losses(bundle: SceneBundle, output: PipelineOutput, cfg: RunConfig) -> dict:
    """Coarse, segmentation and refinement loss values against ground truth.

    Informational: these are the training objectives evaluated on the
    deterministic pipeline state.
    """
    from .scene import project_correspondences, sample_matches

    scene = bundle.scene
    pyramid = bundle.pyramid
    centers32 = pyramid.cell_centers(32).reshape(-1, 2)
    gt32, _, ok32 = correspondences_at(scene, centers32)
    gt_cells = np.floor(np.nan_to_num(gt32, nan=-64.0) / 32.0)
    gate = hyp.LossGateConfig(
        theta1=cfg.theta1,
        gamma=cfg.focal_gamma,
        alpha=cfg.focal_alpha,
        descriptor_dim=cfg.descriptor_dim,
        groups=cfg.groups,
    )
    partition = hyp.loss_gate_partition(bundle.coarse, gt_cells, ok32, gate)
    field8 = project_correspondences(scene, stride=8)
    n_pts = min(512, int(field8.valid.sum()))
    pts = sample_matches(field8, n_pts, derive_seed(cfg.seed, "supervision"))
    l_coarse = hyp.coarse_loss(
        partition, bundle.desc32[0], bundle.desc32[1], gt_cells, bundle.grid, pts, gate
    )

    # segmentation focal loss over geometric targets
    centers8 = pyramid.cell_centers(8).reshape(-1, 2)
    gt8, _, ok8 = correspondences_at(scene, centers8)
    gw8, _ = pyramid.grid_size(8)
    gw32 = bundle.grid.grid_size[0]
    rng = np.random.default_rng(derive_seed(cfg.seed, "seg-loss"))
    sample = rng.choice(np.nonzero(ok8)[0], size=min(256, int(ok8.sum())), replace=False)
    l_seg_terms = []
    for j in sample:
        jy, jx = divmod(int(j), gw8)
        cell = (jx // 4, jy // 4)
        hyps = bundle.grid.neighborhood_homographies(cell)
        if all(h is None for h in hyps):
            continue
        try:
            target = seg.assign_best_hypothesis(centers8[j], gt8[j], hyps)
        except Exception:
            continue
        scores = np.full(9, -np.inf)
        for k, h_k in enumerate(hyps):
            if h_k is None:
                continue
            proj, pok = apply_homography_masked(h_k, centers8[j][None, :])
            if pok[0]:
                scores[k] = -float(np.linalg.norm(proj[0] - gt8[j]))
        if not np.isfinite(scores[target - 1]):
            continue
        value, _ = seg.focal_loss(scores, target, cfg.focal_gamma, cfg.focal_alpha)
        l_seg_terms.append(value)
    l_seg = float(np.mean(l_seg_terms)) if l_seg_terms else 0.0

    # refinement loss over the produced matches
    l_ref_terms = []
    if output.p_s.shape[0]:
        gt_out, _, ok_out = correspondences_at(scene, output.p_s)
        for i in np.nonzero(ok_out)[0]:
            value, _, _ = rf.refinement_loss(
                output.p_t[i], gt_out[i], float(output.confidence[i]), cfg.inlier_threshold_px
            )
            l_ref_terms.append(value)
    l_ref = float(np.mean(l_ref_terms)) if l_ref_terms else 0.0

    return {
        "coarse_loss": float(l_coarse),
        "segmentation_focal_loss": l_seg,
        "refinement_loss": l_ref,
        "q1_units": len(partition[0]),
        "q2_units": len(partition[1]),
    }
