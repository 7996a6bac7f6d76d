"""Per-unit reassignment at 1/8 resolution over 9 neighboring hypotheses.

Every 1/8 unit scores the 3x3 hypothesis neighborhood of its containing
coarse cell and keeps the best one.  Three scorers are available:

- "embedding": inner products against projected hypothesis features plus a
  positional embedding.  The projection is a fixed seeded linear map standing
  in for a learned reduction, so this path is exercised for exactness, not
  accuracy.
- "consistency": cosine between the unit's source descriptor and the target
  descriptor sampled where the hypothesis sends the unit center.  This is the
  scorer the pipeline runs with.
- "oracle": negative projection error at the unit center against ground
  truth, used by accuracy tests.

Neighborhood indices are 1..9 (row-major, 5 = center), as in the coarse
stage; a chosen index of 0 marks an invalid unit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllInvalid, PointAtInfinity
from .geometry import apply_homography_masked
from .hypotheses import CENTER_INDEX, HypothesisGrid, PyramidConfig
from .scene import DescriptorGrid


@dataclass
class SegmentationMap:
    grid_size: tuple[int, int]  # (gw, gh) at 1/8
    choice: np.ndarray  # (gh, gw) uint8, 1..9 local index, 0 invalid
    global_ref: np.ndarray  # (gh, gw) int32 flat coarse unit index, -1 invalid
    valid: np.ndarray  # (gh, gw) bool


def make_positional_table(dim: int, seed: int) -> np.ndarray:
    """Nine fixed orthonormal positional vectors, (9, dim)."""
    if dim < 9:
        raise ValueError("positional table needs dim >= 9")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, 9)))
    return q.T.copy()


def make_projection(dim_in: int, dim_out: int, seed: int) -> np.ndarray:
    """Fixed seeded linear map reducing hypothesis features to unit features."""
    rng = np.random.default_rng(seed)
    return rng.normal(size=(dim_out, dim_in)) / np.sqrt(dim_in)


def segmentation_score(
    f_j: np.ndarray,
    hyp_feats: np.ndarray,
    valid: np.ndarray,
    proj: np.ndarray,
    pos: np.ndarray,
) -> np.ndarray:
    """Nine classification scores <proj(h_i) + pos_i, f_j>.

    hyp_feats is (9, dim_in) with arbitrary content on invalid rows; invalid
    hypotheses score -inf.
    """
    f_j = np.asarray(f_j, dtype=float).reshape(-1)
    hyp_feats = np.asarray(hyp_feats, dtype=float)
    if hyp_feats.shape[0] != 9 or pos.shape[0] != 9:
        raise ValueError("expected 9 hypothesis features and 9 positional vectors")
    keys = hyp_feats @ proj.T + pos
    scores = keys @ f_j
    return np.where(np.asarray(valid, dtype=bool), scores, -np.inf)


def _argmax_prefer_center(scores: np.ndarray) -> int:
    """Index 1..9 of the max score; ties prefer 5, then the lowest index."""
    best = np.max(scores)
    if not np.isfinite(best):
        raise AllInvalid("no scorable hypothesis")
    tied = np.nonzero(scores == best)[0] + 1
    return CENTER_INDEX if CENTER_INDEX in tied else int(tied[0])


def assign_best_hypothesis(
    unit_center: np.ndarray, gt_target: np.ndarray, hyps: list[np.ndarray | None]
) -> int:
    """Index (1..9) minimizing the L2 projection error at the unit center."""
    if len(hyps) != 9:
        raise ValueError("expected exactly 9 hypotheses")
    p = np.asarray(unit_center, dtype=float)
    t = np.asarray(gt_target, dtype=float)
    scores = np.full(9, -np.inf)
    for k, h in enumerate(hyps):
        if h is None:
            continue
        try:
            proj, ok = apply_homography_masked(h, p[None, :])
        except PointAtInfinity:  # pragma: no cover - masked variant never raises
            continue
        if ok[0]:
            scores[k] = -float(np.linalg.norm(proj[0] - t))
    return _argmax_prefer_center(scores)


def focal_loss(
    scores: np.ndarray,
    target_index: int,
    gamma: float = 2.0,
    alpha: float = 0.25,
    mode: str = "softmax",
) -> tuple[float, np.ndarray]:
    """Focal classification loss over 9 scores with its analytic gradient.

    target_index is 1..9.  -inf scores are excluded from the softmax and get
    zero gradient.  mode="sigmoid" treats the 9 classes as independent
    binary problems (summed), with the usual alpha/(1-alpha) weighting.
    """
    s = np.asarray(scores, dtype=float).reshape(9)
    t = target_index - 1
    finite = np.isfinite(s)
    if not finite[t]:
        raise ValueError("target hypothesis is invalid")

    if mode == "softmax":
        z = s[finite] - np.max(s[finite])
        ez = np.exp(z)
        p = ez / ez.sum()
        probs = np.zeros(9)
        probs[finite] = p
        pt = probs[t]
        pt_safe = max(pt, 1e-12)
        value = -alpha * (1.0 - pt) ** gamma * np.log(pt_safe)
        dl_dpt = alpha * (
            gamma * (1.0 - pt) ** (gamma - 1.0) * np.log(pt_safe)
            - (1.0 - pt) ** gamma / pt_safe
        )
        onehot = np.zeros(9)
        onehot[t] = 1.0
        grad = dl_dpt * pt * (onehot - probs)
        grad[~finite] = 0.0
        return float(value), grad

    if mode == "sigmoid":
        value = 0.0
        grad = np.zeros(9)
        for k in range(9):
            if not finite[k]:
                continue
            y = 1.0 if k == t else 0.0
            p = 1.0 / (1.0 + np.exp(-s[k]))
            pt = p if y else 1.0 - p
            a_k = alpha if y else 1.0 - alpha
            pt_safe = max(pt, 1e-12)
            value += -a_k * (1.0 - pt) ** gamma * np.log(pt_safe)
            dl_dpt = a_k * (
                gamma * (1.0 - pt) ** (gamma - 1.0) * np.log(pt_safe)
                - (1.0 - pt) ** gamma / pt_safe
            )
            grad[k] = dl_dpt * p * (1.0 - p) * (1.0 if y else -1.0)
        return float(value), grad

    raise ValueError(f"unknown focal mode {mode!r}")


def segment(
    grid: HypothesisGrid,
    desc_src8: DescriptorGrid,
    pyramid: PyramidConfig,
    mode: str = "consistency",
    desc_src32: DescriptorGrid | None = None,
    proj: np.ndarray | None = None,
    pos: np.ndarray | None = None,
    desc_tgt8: DescriptorGrid | None = None,
    gt_targets: np.ndarray | None = None,
    gt_valid: np.ndarray | None = None,
) -> SegmentationMap:
    """Choose a hypothesis for every 1/8 unit.

    Units whose whole neighborhood is invalid (or scores -inf) are marked
    invalid.  All 1/8 units inside one coarse cell share the same candidate
    neighborhood, so scoring is batched per coarse cell.
    """
    from .scene import bilinear_sample  # local import to avoid cycle at module load

    gw8, gh8 = pyramid.grid_size(8)
    gw32, gh32 = grid.grid_size
    w, h = pyramid.image_size
    choice = np.zeros((gh8, gw8), dtype=np.uint8)
    global_ref = np.full((gh8, gw8), -1, dtype=np.int32)

    centers8 = pyramid.cell_centers(8)
    src_flat = desc_src8.data.reshape(-1, desc_src8.dim).astype(float)

    if mode == "embedding":
        if desc_src32 is None or proj is None or pos is None:
            raise ValueError("embedding mode needs desc_src32, proj and pos")
        feats32 = desc_src32.data.reshape(-1, desc_src32.dim).astype(float)
    if mode == "consistency" and desc_tgt8 is None:
        raise ValueError("consistency mode needs desc_tgt8")
    if mode == "oracle" and (gt_targets is None or gt_valid is None):
        raise ValueError("oracle mode needs gt_targets and gt_valid")
    if mode == "oracle":
        gt_targets = np.asarray(gt_targets, dtype=float).reshape(gh8 * gw8, 2)
        gt_valid = np.asarray(gt_valid, dtype=bool).reshape(gh8 * gw8)

    sub = 32 // 8  # 1/8 units per coarse cell side
    for cy in range(gh32):
        for cx in range(gw32):
            neighborhood = grid.neighborhood((cx, cy))
            hyps = grid.neighborhood_homographies((cx, cy))
            # 1/8 units inside this coarse cell share the candidate set
            jys = np.arange(cy * sub, min((cy + 1) * sub, gh8))
            jxs = np.arange(cx * sub, min((cx + 1) * sub, gw8))
            jj = (jys[:, None] * gw8 + jxs[None, :]).ravel()
            pts = centers8.reshape(-1, 2)[jj]
            scores = np.full((jj.size, 9), -np.inf)

            if mode == "embedding":
                hyp_feats = np.zeros((9, desc_src32.dim))
                valid9 = np.zeros(9, dtype=bool)
                for k, i_glob in enumerate(neighborhood):
                    if i_glob >= 0 and hyps[k] is not None:
                        hyp_feats[k] = feats32[i_glob]
                        valid9[k] = True
                keys = hyp_feats @ proj.T + pos
                raw = src_flat[jj] @ keys.T
                scores = np.where(valid9[None, :], raw, -np.inf)
            else:
                for k, h_k in enumerate(hyps):
                    if h_k is None:
                        continue
                    proj_pts, ok = apply_homography_masked(h_k, pts)
                    if mode == "oracle":
                        sel = ok & gt_valid[jj]
                        err = np.linalg.norm(proj_pts - gt_targets[jj], axis=1)
                        scores[sel, k] = -err[sel]
                    else:  # consistency
                        inb = ok & (proj_pts[:, 0] >= 0) & (proj_pts[:, 0] < w) \
                            & (proj_pts[:, 1] >= 0) & (proj_pts[:, 1] < h)
                        if np.any(inb):
                            samples = bilinear_sample(desc_tgt8, proj_pts[inb])
                            scores[inb, k] = np.einsum("nd,nd->n", samples, src_flat[jj[inb]])

            for row, j in enumerate(jj):
                finite = np.isfinite(scores[row])
                if not np.any(finite):
                    continue
                best = np.max(scores[row])
                tied = np.nonzero(scores[row] == best)[0] + 1
                local = CENTER_INDEX if CENTER_INDEX in tied else int(tied[0])
                jy, jx = divmod(int(j), gw8)
                choice[jy, jx] = local
                global_ref[jy, jx] = neighborhood[local - 1]

    return SegmentationMap(
        grid_size=(gw8, gh8),
        choice=choice,
        global_ref=global_ref,
        valid=choice > 0,
    )
