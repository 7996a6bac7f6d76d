"""Metrics: relative pose recovery, pose AUC, corner error, point accuracy.

Pose estimation is a seeded RANSAC around the normalized 8-point essential
solve with cheirality disambiguation.  A rotation-only model is fitted next
to it; when it explains (nearly) as many correspondences, the translation
direction is flagged as degenerate instead of reporting a meaningless vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationFailed, PointAtInfinity
from .geometry import CameraIntrinsics, CameraPose, apply_homography_masked
from .scene import GroundTruthField

_RANSAC_MAX_ITERS = 2000
_RANSAC_MIN_ITERS = 100
_RANSAC_CONFIDENCE = 0.999


@dataclass
class PoseEstimate:
    rotation: np.ndarray
    t_dir: np.ndarray
    inliers: int
    success: bool
    translation_degenerate: bool = False


@dataclass
class MetricReport:
    """Aggregate metrics of one pipeline variant over a scene set."""

    variant: str
    n_scenes: int = 0
    n_matches: int = 0
    auc5: float = 0.0
    auc10: float = 0.0
    auc20: float = 0.0
    median_endpoint_px: float = float("inf")
    point_accuracy_1px: float = 0.0
    corner_frac_1px: float | None = None
    corner_frac_3px: float | None = None
    corner_frac_5px: float | None = None
    inner_products: int = 0
    attention_queries: int = 0
    wall_time_s: float = 0.0

    def as_pairs(self) -> list[tuple[str, object]]:
        """Stable key/value view used by the text and CSV writers."""
        return [
            ("variant", self.variant),
            ("n_scenes", self.n_scenes),
            ("n_matches", self.n_matches),
            ("auc5", self.auc5),
            ("auc10", self.auc10),
            ("auc20", self.auc20),
            ("median_endpoint_px", self.median_endpoint_px),
            ("point_accuracy_1px", self.point_accuracy_1px),
            ("corner_frac_1px", self.corner_frac_1px),
            ("corner_frac_3px", self.corner_frac_3px),
            ("corner_frac_5px", self.corner_frac_5px),
            ("inner_products", self.inner_products),
            ("attention_queries", self.attention_queries),
        ]


def _normalize_points(pts: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(pts, dtype=float).reshape(-1, 2)
    out = np.empty_like(p)
    out[:, 0] = (p[:, 0] - intr.cx) / intr.fx
    out[:, 1] = (p[:, 1] - intr.cy) / intr.fy
    return out


def _eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray | None:
    """Essential matrix from >= 8 normalized correspondences, or None."""
    n = x1.shape[0]
    c1, c2 = x1.mean(axis=0), x2.mean(axis=0)
    s1 = np.sqrt(2.0) / max(np.sqrt(np.mean(np.sum((x1 - c1) ** 2, axis=1))), 1e-12)
    s2 = np.sqrt(2.0) / max(np.sqrt(np.mean(np.sum((x2 - c2) ** 2, axis=1))), 1e-12)
    y1 = (x1 - c1) * s1
    y2 = (x2 - c2) * s2
    a = np.empty((n, 9))
    a[:, 0] = y2[:, 0] * y1[:, 0]
    a[:, 1] = y2[:, 0] * y1[:, 1]
    a[:, 2] = y2[:, 0]
    a[:, 3] = y2[:, 1] * y1[:, 0]
    a[:, 4] = y2[:, 1] * y1[:, 1]
    a[:, 5] = y2[:, 1]
    a[:, 6] = y1[:, 0]
    a[:, 7] = y1[:, 1]
    a[:, 8] = 1.0
    try:
        _, sing, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if sing[7] < 1e-12 * sing[0]:
        return None  # degenerate sample
    e_cond = vt[-1].reshape(3, 3)
    t1 = np.array([[s1, 0, -s1 * c1[0]], [0, s1, -s1 * c1[1]], [0, 0, 1]])
    t2 = np.array([[s2, 0, -s2 * c2[0]], [0, s2, -s2 * c2[1]], [0, 0, 1]])
    e_raw = t2.T @ e_cond @ t1
    u, s, vt2 = np.linalg.svd(e_raw)
    sigma = (s[0] + s[1]) / 2.0
    return u @ np.diag([sigma, sigma, 0.0]) @ vt2


def _sampson_distance(e: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.hstack([x1, np.ones((x1.shape[0], 1))])
    h2 = np.hstack([x2, np.ones((x2.shape[0], 1))])
    ex1 = h1 @ e.T
    etx2 = h2 @ e
    num = np.sum(h2 * ex1, axis=1) ** 2
    den = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def _triangulate_depths(x1, x2, r_mat, t):
    """Depths in both cameras for normalized correspondences (linear DLT)."""
    n = x1.shape[0]
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r_mat, t.reshape(3, 1)])
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        a = np.stack(
            [
                x1[i, 0] * p1[2] - p1[0],
                x1[i, 1] * p1[2] - p1[1],
                x2[i, 0] * p2[2] - p2[0],
                x2[i, 1] * p2[2] - p2[1],
            ]
        )
        _, _, vt = np.linalg.svd(a)
        xh = vt[-1]
        if abs(xh[3]) < 1e-12:
            d1[i] = d2[i] = -1.0
            continue
        x3d = xh[:3] / xh[3]
        d1[i] = x3d[2]
        d2[i] = (r_mat @ x3d + t)[2]
    return d1, d2


def _decompose_essential(e, x1, x2):
    """Cheirality-tested (R, t) from an essential matrix."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t_base = u[:, 2]
    sub = np.arange(x1.shape[0])
    if sub.size > 100:
        sub = np.linspace(0, x1.shape[0] - 1, 100).astype(int)
    best, best_front = None, -1
    for r_mat in (u @ w @ vt, u @ w.T @ vt):
        for t in (t_base, -t_base):
            d1, d2 = _triangulate_depths(x1[sub], x2[sub], r_mat, t)
            front = int(np.sum((d1 > 0) & (d2 > 0)))
            if front > best_front:
                best_front = front
                best = (r_mat, t)
    return best


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    k = w / theta
    kx = _skew(k)
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _signed_epipolar_residual(r_mat, t, x1h, x2h):
    e = _skew(t) @ r_mat
    ex1 = x1h @ e.T
    etx2 = x2h @ e
    num = np.sum(x2h * ex1, axis=1)
    den = np.sqrt(ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def _polish_pose(r_mat, t, x1, x2, thr, iters=15):
    """Damped Gauss-Newton on (SO(3), S^2) over Huber-weighted residuals.

    Linear eight-point refits are unstable on quasi-planar match sets; this
    refines the decomposed pose directly, which cannot jump between model
    families.
    """
    x1h = np.hstack([x1, np.ones((x1.shape[0], 1))])
    x2h = np.hstack([x2, np.ones((x2.shape[0], 1))])
    t = t / np.linalg.norm(t)

    def cost(r_c, t_c):
        r = _signed_epipolar_residual(r_c, t_c, x1h, x2h)
        a = np.abs(r)
        hub = np.where(a <= thr, 0.5 * r * r, thr * (a - 0.5 * thr))
        return float(hub.sum()), r

    c, res = cost(r_mat, t)
    lam = 1e-4
    h = 1e-7
    for _ in range(iters):
        u = np.array([1.0, 0, 0]) if abs(t[0]) < 0.9 else np.array([0, 1.0, 0])
        b1 = np.cross(t, u)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(t, b1)
        jac = np.zeros((x1.shape[0], 5))
        for k in range(3):
            dw = np.zeros(3)
            dw[k] = h
            jac[:, k] = (_signed_epipolar_residual(_exp_so3(dw) @ r_mat, t, x1h, x2h) - res) / h
        for k, b in enumerate((b1, b2)):
            tp = t + h * b
            tp /= np.linalg.norm(tp)
            jac[:, 3 + k] = (_signed_epipolar_residual(r_mat, tp, x1h, x2h) - res) / h
        w = np.where(np.abs(res) <= thr, 1.0, thr / np.maximum(np.abs(res), 1e-300))
        a_mat = (jac * w[:, None]).T @ jac + lam * np.eye(5)
        g = (jac * w[:, None]).T @ res
        try:
            step = np.linalg.solve(a_mat, -g)
        except np.linalg.LinAlgError:
            break
        r_new = _exp_so3(step[:3]) @ r_mat
        t_new = t + step[3] * b1 + step[4] * b2
        t_new /= np.linalg.norm(t_new)
        c_new, res_new = cost(r_new, t_new)
        if c_new < c:
            r_mat, t, c, res = r_new, t_new, c_new, res_new
            lam = max(lam * 0.5, 1e-7)
        else:
            lam *= 10.0
            if lam > 1e3:
                break
    return r_mat, t


def _kabsch_rotation(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Best rotation aligning bearing vectors of x1 to x2."""
    b1 = np.hstack([x1, np.ones((x1.shape[0], 1))])
    b2 = np.hstack([x2, np.ones((x2.shape[0], 1))])
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 /= np.linalg.norm(b2, axis=1, keepdims=True)
    h = b2.T @ b1
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _rotation_angles(x1, x2, r_mat):
    b1 = np.hstack([x1, np.ones((x1.shape[0], 1))])
    b2 = np.hstack([x2, np.ones((x2.shape[0], 1))])
    b1 = (r_mat @ b1.T).T
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 /= np.linalg.norm(b2, axis=1, keepdims=True)
    dots = np.clip(np.sum(b1 * b2, axis=1), -1.0, 1.0)
    return np.arccos(dots)


def estimate_relative_pose(
    p_s: np.ndarray,
    p_t: np.ndarray,
    k1: CameraIntrinsics,
    k2: CameraIntrinsics,
    ransac_threshold_px: float = 0.25,
    seed: int = 0,
) -> PoseEstimate:
    """Seeded RANSAC essential-matrix pose with cheirality disambiguation.

    The pixel threshold is converted to normalized units via the mean focal
    length.  Raises EstimationFailed when fewer than 8 matches are available
    or no consensus of at least 8 inliers exists.
    """
    p_s = np.asarray(p_s, dtype=float).reshape(-1, 2)
    p_t = np.asarray(p_t, dtype=float).reshape(-1, 2)
    n = p_s.shape[0]
    if n < 8:
        raise EstimationFailed(f"need at least 8 matches, got {n}")
    x1 = _normalize_points(p_s, k1)
    x2 = _normalize_points(p_t, k2)
    mean_focal = (k1.fx + k1.fy + k2.fx + k2.fy) / 4.0
    thr = ransac_threshold_px / mean_focal

    rng = np.random.default_rng(seed)
    best_e = None
    best_mask = None
    best_count = 0
    needed = _RANSAC_MAX_ITERS
    it = 0
    while it < min(max(needed, _RANSAC_MIN_ITERS), _RANSAC_MAX_ITERS):
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        e = _eight_point(x1[sample], x2[sample])
        if e is None:
            continue
        d = _sampson_distance(e, x1, x2)
        mask = d < thr
        count = int(mask.sum())
        if count > best_count:
            best_e = e
            best_count = count
            best_mask = mask
            w = count / n
            if w > 0:
                denom = np.log(max(1.0 - w**8, 1e-300))
                needed = int(np.ceil(np.log(1.0 - _RANSAC_CONFIDENCE) / denom)) if denom < 0 else it

    # rotation-only alternative, also the fallback when the scene carries no
    # usable epipolar geometry (exact zero baseline)
    r_rot = _kabsch_rotation(x1, x2)
    rot_inliers = int(np.sum(_rotation_angles(x1, x2, r_rot) < thr))

    if best_e is None or best_count < 8:
        if rot_inliers >= 8:
            return PoseEstimate(
                rotation=r_rot,
                t_dir=np.array([0.0, 0.0, 1.0]),
                inliers=rot_inliers,
                success=True,
                translation_degenerate=True,
            )
        raise EstimationFailed("no essential-matrix consensus")

    # one widened least-squares refit for a better starting point, then a
    # Gauss-Newton polish of the decomposed pose itself
    fit_mask = _sampson_distance(best_e, x1, x2) < 3.0 * thr
    if fit_mask.sum() >= 8:
        e_wide = _eight_point(x1[fit_mask], x2[fit_mask])
        if e_wide is not None and int((_sampson_distance(e_wide, x1, x2) < 3.0 * thr).sum()) >= best_count:
            best_e = e_wide
    r_mat, t = _decompose_essential(best_e, x1[best_mask], x2[best_mask])
    r_mat, t = _polish_pose(r_mat, t, x1, x2, thr)
    best_mask = _sampson_distance(_skew(t) @ r_mat, x1, x2) < thr
    best_count = max(int(best_mask.sum()), best_count)

    if rot_inliers >= 0.95 * best_count:
        return PoseEstimate(
            rotation=r_rot,
            t_dir=np.array([0.0, 0.0, 1.0]),
            inliers=rot_inliers,
            success=True,
            translation_degenerate=True,
        )

    t_norm = np.linalg.norm(t)
    t_dir = t / t_norm if t_norm > 0 else np.array([0.0, 0.0, 1.0])
    return PoseEstimate(
        rotation=r_mat, t_dir=t_dir, inliers=best_count, success=True
    )


def pose_error(est: PoseEstimate, gt: CameraPose) -> tuple[float, float]:
    """(rotation error, translation direction error) in degrees.

    The translation error is 0 when the ground-truth baseline is zero
    (direction unmeasurable) and 90 when the estimate declared its direction
    degenerate against a real baseline.
    """
    r_rel = est.rotation @ gt.R.T
    rot_err = np.degrees(np.arccos(np.clip((np.trace(r_rel) - 1.0) / 2.0, -1.0, 1.0)))
    t_norm = np.linalg.norm(gt.t)
    if t_norm < 1e-9:
        return float(rot_err), 0.0
    if est.translation_degenerate:
        return float(rot_err), 90.0
    gt_dir = gt.t / t_norm
    cosang = abs(float(np.dot(est.t_dir, gt_dir)))  # min over sign
    return float(rot_err), float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def auc(errors, threshold: float) -> float:
    """Exact area under the empirical error CDF up to `threshold`, in [0, 1].

    Infinite entries (failures) count in the denominator.  Equals
    sum(max(0, T - e_i)) / (N * T).
    """
    errs = np.asarray(list(errors), dtype=float)
    if errs.size == 0:
        return 0.0
    finite = errs[np.isfinite(errs)]
    if finite.size == 0:
        return 0.0
    gain = np.maximum(0.0, threshold - finite)
    return float(gain.sum() / (errs.size * threshold))


def corner_error(
    h_est: np.ndarray, h_gt: np.ndarray, image_size: tuple[int, int]
) -> float:
    """Mean L2 distance of the four image corners under the two homographies."""
    w, h = image_size
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    pe, oke = apply_homography_masked(h_est, corners)
    pg, okg = apply_homography_masked(h_gt, corners)
    if not (oke.all() and okg.all()):
        return float("inf")
    return float(np.mean(np.linalg.norm(pe - pg, axis=1)))


def point_accuracy(
    p_s: np.ndarray,
    p_t: np.ndarray,
    gt_field: GroundTruthField,
    threshold_px: float = 1.0,
) -> float:
    """Fraction of matches within threshold of ground truth, over valid GT."""
    tgt, _, ok = gt_field.lookup(p_s)
    if not np.any(ok):
        warnings.warn("point_accuracy: no matches with valid ground truth")
        return 0.0
    err = np.linalg.norm(np.asarray(p_t, dtype=float).reshape(-1, 2)[ok] - tgt[ok], axis=1)
    return float(np.mean(err <= threshold_px))


def evaluate_output(scene, output, cfg, pose_error_mode: str = "max") -> dict:
    """Per-scene metrics for one pipeline output.

    Endpoint errors are measured against analytic ground truth at the match
    source points; matches without valid ground truth are excluded.  The pose
    error is max(rotation, translation) by default ("rotation" restricts to
    the rotation part).
    """
    row, _ = _scene_metrics(scene, output, cfg, pose_error_mode)
    return row


def _scene_metrics(scene, output, cfg, pose_error_mode: str = "max"):
    from .config import derive_seed
    from .scene import correspondences_at

    row: dict = {"variant": output.variant, "n_matches": int(output.p_s.shape[0])}
    if output.p_s.shape[0]:
        gt, _, ok = correspondences_at(scene, output.p_s)
        err = np.linalg.norm(output.p_t[ok] - gt[ok], axis=1)
    else:
        err = np.array([])
    row["n_valid_gt"] = int(err.size)
    row["median_endpoint_px"] = float(np.median(err)) if err.size else float("inf")
    row["point_accuracy"] = (
        float(np.mean(err <= cfg.point_accuracy_threshold_px)) if err.size else 0.0
    )

    try:
        est = estimate_relative_pose(
            output.p_s,
            output.p_t,
            scene.cam1.intrinsics,
            scene.cam2.intrinsics,
            cfg.ransac_threshold_px,
            seed=derive_seed(cfg.seed, f"ransac-{output.variant}"),
        )
        rot_err, trans_err = pose_error(est, scene.cam2.pose)
        row["rot_err_deg"] = rot_err
        row["trans_err_deg"] = trans_err
        row["pose_err_deg"] = rot_err if pose_error_mode == "rotation" else max(rot_err, trans_err)
        row["pose_inliers"] = est.inliers
    except EstimationFailed:
        row["rot_err_deg"] = row["trans_err_deg"] = row["pose_err_deg"] = float("inf")
        row["pose_inliers"] = 0

    if len(scene.planes) == 1 and output.p_s.shape[0] >= 4:
        try:
            h_est = ransac_homography(
                output.p_s,
                output.p_t,
                threshold_px=max(cfg.ransac_threshold_px, 0.25),
                seed=derive_seed(cfg.seed, f"homography-{output.variant}"),
            )
            row["corner_error_px"] = corner_error(
                h_est, scene.plane_homographies()[0], scene.image_size
            )
        except EstimationFailed:
            row["corner_error_px"] = float("inf")
    else:
        row["corner_error_px"] = None
    return row, err


def run_ablation(seeds, cfg, variants=None, pose_error_mode: str = "max"):
    """Run pipeline variants over seeded scenes with identical inputs.

    Returns (reports, rows): one MetricReport per variant plus the per-scene
    metric rows, each row tagged with its seed and variant.
    """
    import time

    from dataclasses import replace

    from .config import VARIANTS
    from .pipeline import prepare_bundle, run_variant
    from .scene import generate_scene

    variants = list(variants) if variants is not None else list(VARIANTS)
    rows = []
    per_variant: dict = {
        v: {"errors": [], "pose": [], "acc": [], "corner": [], "n": 0, "prods": 0, "queries": 0, "time": 0.0, "scenes": 0}
        for v in variants
    }
    for seed in seeds:
        scene_cfg = replace(cfg, seed=int(seed))
        scene = generate_scene(
            seed=int(seed),
            n_planes=cfg.n_planes,
            image_size=cfg.image_size,
            baseline_scale=cfg.baseline_scale,
            fronto_parallel=cfg.fronto_parallel,
        )
        bundle = prepare_bundle(scene, scene_cfg)
        for variant in variants:
            t0 = time.perf_counter()
            output = run_variant(bundle, variant, scene_cfg)
            row, errors = _scene_metrics(scene, output, scene_cfg, pose_error_mode)
            row["seed"] = int(seed)
            rows.append(row)
            agg = per_variant[variant]
            agg["errors"].extend(errors.tolist())
            agg["pose"].append(row["pose_err_deg"])
            agg["acc"].append(row["point_accuracy"])
            if row["corner_error_px"] is not None:
                agg["corner"].append(row["corner_error_px"])
            agg["n"] += row["n_matches"]
            agg["prods"] += output.counter.inner_products
            agg["queries"] += output.counter.queries
            agg["time"] += output.wall_time_s + (time.perf_counter() - t0)
            agg["scenes"] += 1

    reports = {}
    for variant in variants:
        agg = per_variant[variant]
        corner = np.asarray(agg["corner"], dtype=float)
        report = MetricReport(
            variant=variant,
            n_scenes=agg["scenes"],
            n_matches=agg["n"],
            auc5=auc(agg["pose"], 5.0),
            auc10=auc(agg["pose"], 10.0),
            auc20=auc(agg["pose"], 20.0),
            median_endpoint_px=float(np.median(agg["errors"])) if agg["errors"] else float("inf"),
            point_accuracy_1px=float(np.mean(agg["acc"])) if agg["acc"] else 0.0,
            corner_frac_1px=float(np.mean(corner < 1.0)) if corner.size else None,
            corner_frac_3px=float(np.mean(corner < 3.0)) if corner.size else None,
            corner_frac_5px=float(np.mean(corner < 5.0)) if corner.size else None,
            inner_products=agg["prods"],
            attention_queries=agg["queries"],
            wall_time_s=agg["time"],
        )
        reports[variant] = report
    return reports, rows


def ransac_homography(
    p_s: np.ndarray,
    p_t: np.ndarray,
    threshold_px: float = 0.25,
    seed: int = 0,
    max_iters: int = 2000,
) -> np.ndarray:
    """Robust DLT homography over matches (evaluation plumbing)."""
    from .geometry import solve_homography_dlt
    from .errors import SingularSystem

    p_s = np.asarray(p_s, dtype=float).reshape(-1, 2)
    p_t = np.asarray(p_t, dtype=float).reshape(-1, 2)
    n = p_s.shape[0]
    if n < 4:
        raise EstimationFailed("need at least 4 matches for a homography")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            h = solve_homography_dlt(p_s[sample], p_t[sample])
        except SingularSystem:
            continue
        proj, ok = apply_homography_masked(h, p_s)
        err = np.linalg.norm(proj - p_t, axis=1)
        mask = ok & (err < threshold_px)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / n
            if w > 0:
                denom = np.log(max(1.0 - w**4, 1e-300))
                needed = int(np.ceil(np.log(1.0 - _RANSAC_CONFIDENCE) / denom)) if denom < 0 else it
    if best_mask is None or best_count < 4:
        raise EstimationFailed("no homography consensus")
    try:
        return solve_homography_dlt(p_s[best_mask], p_t[best_mask])
    except SingularSystem as exc:
        raise EstimationFailed("degenerate homography consensus") from exc
