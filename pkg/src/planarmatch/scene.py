"""Synthetic piecewise-planar two-view scenes and ground-truth correspondences.

A scene is a set of bounded planar rectangles in the frame of camera 1 plus a
second calibrated camera.  Ground truth is computed analytically by ray-plane
intersection; nothing is rendered.  Descriptor grids are deterministic random
Fourier embeddings of the 3D point each grid unit sees, which gives cosine
similarity that decays smoothly with 3D distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationFailed, InsufficientValid
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    Plane3D,
    plane_induced_homography,
)

PYRAMID_STRIDES = (32, 8, 2)

_EPS = 1e-12
_OCCLUSION_TOL = 1e-6
_MAX_ATTEMPTS = 100


@dataclass
class ScenePlane:
    """A bounded rectangle on a 3D plane (camera-1 frame)."""

    plane: Plane3D
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.axis_u = np.asarray(self.axis_u, dtype=float).reshape(3)
        self.axis_v = np.asarray(self.axis_v, dtype=float).reshape(3)

    @property
    def polygon(self) -> np.ndarray:
        """Rectangle vertices, (4, 3), counter-clockwise in plane coords."""
        c, u, v = self.center, self.axis_u * self.half_u, self.axis_v * self.half_v
        return np.array([c - u - v, c + u - v, c + u + v, c - u + v])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Membership test for points known to lie on the plane, (N, 3) -> (N,)."""
        rel = np.asarray(pts, dtype=float).reshape(-1, 3) - self.center
        du = rel @ self.axis_u
        dv = rel @ self.axis_v
        return (np.abs(du) <= self.half_u) & (np.abs(dv) <= self.half_v)


@dataclass
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose


@dataclass
class PlanarScene:
    planes: list[ScenePlane]
    cam1: Camera
    cam2: Camera
    image_size: tuple[int, int]
    seed: int = 0
    baseline_scale: float = 0.0
    fronto_parallel: bool = False

    def plane_homographies(self) -> list[np.ndarray]:
        """Plane-induced homography for every scene plane."""
        return [
            plane_induced_homography(
                self.cam1.intrinsics, self.cam2.intrinsics, self.cam2.pose, sp.plane
            )
            for sp in self.planes
        ]


@dataclass
class GroundTruthField:
    """Dense source-to-target correspondence map sampled on a stride grid.

    Sample (i, j) corresponds to the continuous source coordinate
    (j * stride, i * stride).
    """

    image_size: tuple[int, int]
    stride: int
    target: np.ndarray  # (gh, gw, 2) float
    plane_id: np.ndarray  # (gh, gw) int32, -1 where no plane is hit
    valid: np.ndarray  # (gh, gw) bool

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.target.shape[0], self.target.shape[1]

    def source_coords(self) -> np.ndarray:
        """Continuous source coordinates of every sample, (gh, gw, 2)."""
        gh, gw = self.grid_shape
        xs = np.arange(gw) * self.stride
        ys = np.arange(gh) * self.stride
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1).astype(float)

    def lookup(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact-grid lookup of (target, plane_id, valid) for points on the stride grid."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        idx = pts / self.stride
        cols = np.rint(idx[:, 0]).astype(int)
        rows = np.rint(idx[:, 1]).astype(int)
        if np.max(np.abs(idx[:, 0] - cols)) > 1e-6 or np.max(np.abs(idx[:, 1] - rows)) > 1e-6:
            raise ValueError("query points are not aligned with the field stride")
        gh, gw = self.grid_shape
        inside = (cols >= 0) & (cols < gw) & (rows >= 0) & (rows < gh)
        tgt = np.full((pts.shape[0], 2), np.nan)
        pid = np.full(pts.shape[0], -1, dtype=np.int32)
        ok = np.zeros(pts.shape[0], dtype=bool)
        r, c = rows[inside], cols[inside]
        tgt[inside] = self.target[r, c]
        pid[inside] = self.plane_id[r, c]
        ok[inside] = self.valid[r, c]
        return tgt, pid, ok


@dataclass
class DescriptorGrid:
    """Unit-normalized per-unit descriptors at one pyramid level."""

    level: int  # stride in pixels: 32, 8 or 2
    dim: int
    data: np.ndarray  # (gh, gw, dim) float32, rows unit norm
    valid: np.ndarray  # (gh, gw) bool, False where the unit sees no plane

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def unit_centers(self) -> np.ndarray:
        """Continuous pixel coordinates of unit centers, (gh, gw, 2)."""
        gh, gw = self.grid_shape
        xs = (np.arange(gw) + 0.5) * self.level
        ys = (np.arange(gh) + 0.5) * self.level
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


def _rotation_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def _backproject(
    scene: PlanarScene, cam_index: int, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersect pixel rays of one camera with the nearest scene plane.

    Returns (points3d_cam1_frame, plane_id, hit) for pixel coordinates pts
    (N, 2).  plane_id is -1 where no plane is hit.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    n_pts = pts.shape[0]
    cam = scene.cam1 if cam_index == 1 else scene.cam2
    k_inv = cam.intrinsics.inverse
    rays = np.hstack([pts, np.ones((n_pts, 1))]) @ k_inv.T  # z component is 1

    r_mat, t = cam.pose.R, cam.pose.t
    depth = np.full(n_pts, np.inf)
    plane_id = np.full(n_pts, -1, dtype=np.int32)
    hit_pts_cam = np.zeros((n_pts, 3))

    for k, sp in enumerate(scene.planes):
        # plane expressed in this camera's frame
        n_cam = r_mat @ sp.plane.n
        d_cam = sp.plane.d + n_cam @ t
        denom = rays @ n_cam
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(np.abs(denom) > _EPS, d_cam / denom, np.inf)
        cand = (lam > _EPS) & np.isfinite(lam)
        if not np.any(cand):
            continue
        pts_cam = lam[:, None] * rays
        pts_world = (pts_cam - t) @ r_mat  # R^T (X_cam - t)
        inside = np.zeros(n_pts, dtype=bool)
        inside[cand] = sp.contains(pts_world[cand])
        closer = cand & inside & (lam < depth)
        depth[closer] = lam[closer]
        plane_id[closer] = k
        hit_pts_cam[closer] = pts_cam[closer]

    hit = plane_id >= 0
    world = np.full((n_pts, 3), np.nan)
    world[hit] = (hit_pts_cam[hit] - t) @ r_mat
    return world, plane_id, hit


def correspondences_at(
    scene: PlanarScene, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic ground truth for arbitrary source coordinates.

    Returns (target, plane_id, valid).  A point is valid when its camera-1 ray
    hits a plane, the 3D point is in front of camera 2, projects inside the
    target image, and is not occluded by a nearer plane in camera 2.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    w, h = scene.image_size
    world, plane_id, hit = _backproject(scene, 1, pts)

    r_mat, t = scene.cam2.pose.R, scene.cam2.pose.t
    k2 = scene.cam2.intrinsics.matrix
    target = np.full((pts.shape[0], 2), np.nan)
    valid = np.zeros(pts.shape[0], dtype=bool)
    if not np.any(hit):
        return target, plane_id, valid

    x2_cam = world[hit] @ r_mat.T + t
    front = x2_cam[:, 2] > _EPS
    proj = np.full((x2_cam.shape[0], 2), np.nan)
    proj[front] = (x2_cam[front] @ k2.T)[:, :2] / x2_cam[front, 2:3]
    target[hit] = proj

    in_bounds = front & (proj[:, 0] >= 0) & (proj[:, 0] < w) & (proj[:, 1] >= 0) & (proj[:, 1] < h)

    # occlusion: does any plane intersect the camera-2 ray strictly nearer?
    occluded = np.zeros(x2_cam.shape[0], dtype=bool)
    check = in_bounds.copy()
    if np.any(check):
        k2_inv = scene.cam2.intrinsics.inverse
        rays2 = np.hstack([proj[check], np.ones((int(check.sum()), 1))]) @ k2_inv.T
        lam_self = x2_cam[check, 2]
        occ = np.zeros(rays2.shape[0], dtype=bool)
        for sp in scene.planes:
            n2 = r_mat @ sp.plane.n
            d2 = sp.plane.d + n2 @ t
            denom = rays2 @ n2
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = np.where(np.abs(denom) > _EPS, d2 / denom, np.inf)
            nearer = (lam > _EPS) & (lam < lam_self - _OCCLUSION_TOL)
            if not np.any(nearer):
                continue
            cand_world = (lam[nearer, None] * rays2[nearer] - t) @ r_mat
            inside = sp.contains(cand_world)
            sel = np.where(nearer)[0][inside]
            occ[sel] = True
        occluded[check] = occ

    valid[hit] = in_bounds & ~occluded
    return target, plane_id, valid


def generate_scene(
    seed: int,
    n_planes: int,
    image_size: tuple[int, int] = (640, 480),
    baseline_scale: float = 0.15,
    fronto_parallel: bool = False,
) -> PlanarScene:
    """Rejection-sample a piecewise-planar scene with two valid views.

    The farthest plane is a backdrop covering the whole view; nearer planes
    partially occlude it.  Camera 2 is placed at distance
    baseline_scale * mean_depth looking at the scene centroid; its rotation
    never exceeds 30 degrees.  In fronto_parallel mode all plane normals are
    (0, 0, 1) and camera 2 is a pure translation.

    Raises GenerationFailed after 100 rejected attempts.
    """
    w, h = image_size
    if w % 32 or h % 32:
        raise ValueError("image size must be divisible by 32")
    if not 1 <= n_planes <= 16:
        raise ValueError("n_planes must be in [1, 16]")

    rng = np.random.default_rng(seed)
    for _ in range(_MAX_ATTEMPTS):
        focal = rng.uniform(0.75, 0.95) * w
        intr = CameraIntrinsics(focal, focal, w / 2.0, h / 2.0)
        k_inv = intr.inverse

        depths = np.sort(rng.uniform(4.0, 8.0, size=n_planes))[::-1]
        planes: list[ScenePlane] = []
        degenerate = False
        for k in range(n_planes):
            z = depths[k]
            if k == 0:
                anchor = np.array([w / 2.0, h / 2.0])
            else:
                anchor = rng.uniform([0.2 * w, 0.2 * h], [0.8 * w, 0.8 * h])
            center = z * (k_inv @ np.array([anchor[0], anchor[1], 1.0]))
            if fronto_parallel:
                n = np.array([0.0, 0.0, 1.0])
            else:
                tilt = rng.uniform(0.0, np.deg2rad(35.0))
                azim = rng.uniform(0.0, 2 * np.pi)
                n = np.array(
                    [np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), np.cos(tilt)]
                )
            d = float(n @ center)
            if d <= 0.1:
                degenerate = True
                break
            axis_u = np.cross(n, [0.0, 1.0, 0.0])
            if np.linalg.norm(axis_u) < 1e-6:
                axis_u = np.cross(n, [1.0, 0.0, 0.0])
            axis_u /= np.linalg.norm(axis_u)
            axis_v = np.cross(n, axis_u)
            half_w_frustum = z * w / (2 * focal)
            half_h_frustum = z * h / (2 * focal)
            if k == 0:
                half_u, half_v = 1.8 * half_w_frustum, 1.8 * half_h_frustum
            else:
                half_u = rng.uniform(0.25, 0.6) * half_w_frustum
                half_v = rng.uniform(0.25, 0.6) * half_h_frustum
            sp = ScenePlane(Plane3D(n=n, d=d), center, axis_u, axis_v, half_u, half_v)
            if np.any(sp.polygon[:, 2] < 0.5):
                degenerate = True
                break
            planes.append(sp)
        if degenerate:
            continue

        probe = PlanarScene(
            planes=planes,
            cam1=Camera(intr, CameraPose.identity()),
            cam2=Camera(intr, CameraPose.identity()),
            image_size=image_size,
        )
        # coverage raster in camera 1, aligned with the stride-8 field grid
        xs = np.arange(0, w, 8, dtype=float)
        ys = np.arange(0, h, 8, dtype=float)
        gx, gy = np.meshgrid(xs, ys)
        raster = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        world, pid, hit = _backproject(probe, 1, raster)
        n_samples = raster.shape[0]
        if np.any(np.bincount(pid[hit], minlength=n_planes) < 0.02 * n_samples):
            continue
        mean_depth = float(np.mean(world[hit][:, 2]))
        centroid = world[hit].mean(axis=0)

        placed = False
        for _ in range(10):
            if fronto_parallel:
                lateral = rng.normal(size=3) * np.array([1.0, 1.0, 0.2])
                direction = lateral / max(np.linalg.norm(lateral), 1e-9)
                center2 = direction * baseline_scale * mean_depth
                r2 = np.eye(3)
            else:
                lateral = rng.normal(size=3) * np.array([1.0, 1.0, 0.35])
                direction = lateral / max(np.linalg.norm(lateral), 1e-9)
                center2 = direction * baseline_scale * mean_depth
                fwd = centroid - center2
                z2 = fwd / np.linalg.norm(fwd)
                x2 = np.cross([0.0, 1.0, 0.0], z2)
                x2 /= np.linalg.norm(x2)
                y2 = np.cross(z2, x2)
                base = np.stack([x2, y2, z2])
                roll = rng.uniform(-0.1, 0.1)
                r2 = _rotation_axis_angle([0, 0, 1.0], roll) @ base
            angle = np.arccos(np.clip((np.trace(r2) - 1) / 2, -1, 1))
            if angle > np.deg2rad(30.0):
                continue
            t2 = -r2 @ center2
            pose2 = CameraPose(R=r2, t=t2)
            candidate = PlanarScene(
                planes=planes,
                cam1=Camera(intr, CameraPose.identity()),
                cam2=Camera(intr, pose2),
                image_size=image_size,
                seed=seed,
                baseline_scale=baseline_scale,
                fronto_parallel=fronto_parallel,
            )
            _, pid2, hit2 = _backproject(candidate, 2, raster)
            counts2 = np.bincount(pid2[hit2], minlength=n_planes)
            if np.any(counts2 < 0.01 * n_samples):
                continue
            placed = True
            break
        if placed:
            return candidate

    raise GenerationFailed(f"no valid scene after {_MAX_ATTEMPTS} attempts (seed={seed})")


def project_correspondences(scene: PlanarScene, stride: int = 1) -> GroundTruthField:
    """Compute the dense ground-truth field at the requested stride."""
    w, h = scene.image_size
    gw, gh = w // stride, h // stride
    xs = np.arange(gw) * stride
    ys = np.arange(gh) * stride
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1).astype(float)
    target, plane_id, valid = correspondences_at(scene, pts)
    return GroundTruthField(
        image_size=scene.image_size,
        stride=stride,
        target=target.reshape(gh, gw, 2),
        plane_id=plane_id.reshape(gh, gw).astype(np.int32),
        valid=valid.reshape(gh, gw),
    )


def synth_descriptors(
    scene: PlanarScene,
    level: int,
    dim: int,
    noise_sigma: float,
    seed: int,
    length_scale_units: float | None = None,
) -> tuple[DescriptorGrid, DescriptorGrid]:
    """Deterministic descriptor grids for both images at one pyramid level.

    Each unit embeds the 3D point its center pixel sees through a random
    Fourier feature map whose kernel length scale equals length_scale_units
    grid cells (converted to 3D via the median scene depth).  Units that see
    no plane get independent random descriptors.  noise_sigma is the RMS norm
    of the pre-normalization Gaussian perturbation.

    The default length scale is 1 cell, except 2 cells at the 1/2 level: the
    wider kernel is locally quadratic over the attention window, which keeps
    the softmax expected-offset estimator unbiased.
    """
    if dim < 8:
        raise ValueError("descriptor dim must be >= 8")
    if level not in PYRAMID_STRIDES:
        raise ValueError(f"level must be one of {PYRAMID_STRIDES}")
    if length_scale_units is None:
        length_scale_units = 2.0 if level == 2 else 1.0
    w, h = scene.image_size
    gw, gh = w // level, h // level
    xs = (np.arange(gw) + 0.5) * level
    ys = (np.arange(gh) + 0.5) * level
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=-1)

    world1, _, hit1 = _backproject(scene, 1, centers)
    world2, _, hit2 = _backproject(scene, 2, centers)

    f_ref = 0.5 * (scene.cam1.intrinsics.fx + scene.cam1.intrinsics.fy)
    z_ref = float(np.median(world1[hit1][:, 2])) if np.any(hit1) else 5.0
    ell = level * length_scale_units * z_ref / f_ref

    rng = np.random.default_rng(seed)
    freqs = rng.normal(size=(dim, 3)) / ell
    phases = rng.uniform(0.0, 2 * np.pi, size=dim)

    def embed(world: np.ndarray, hit: np.ndarray) -> np.ndarray:
        n = world.shape[0]
        out = np.zeros((n, dim))
        if np.any(hit):
            feats = np.cos(world[hit] @ freqs.T + phases) * np.sqrt(2.0 / dim)
            out[hit] = feats
        if noise_sigma > 0 and np.any(hit):
            out[hit] += rng.normal(size=(int(hit.sum()), dim)) * (noise_sigma / np.sqrt(dim))
        if np.any(~hit):
            out[~hit] = rng.normal(size=(int((~hit).sum()), dim))
        out /= np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        return out

    data1 = embed(world1, hit1)
    data2 = embed(world2, hit2)
    src = DescriptorGrid(level, dim, data1.reshape(gh, gw, dim).astype(np.float32), hit1.reshape(gh, gw))
    tgt = DescriptorGrid(level, dim, data2.reshape(gh, gw, dim).astype(np.float32), hit2.reshape(gh, gw))
    return src, tgt


def bilinear_sample(grid: DescriptorGrid, pts: np.ndarray) -> np.ndarray:
    """Bilinearly interpolated descriptors at continuous pixel coords, (N, dim).

    Coordinates are clamped to the grid, so callers must bound-check first
    when out-of-image queries should be rejected.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    gh, gw = grid.grid_shape
    gx = np.clip(pts[:, 0] / grid.level - 0.5, 0.0, gw - 1.0)
    gy = np.clip(pts[:, 1] / grid.level - 0.5, 0.0, gh - 1.0)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    d = grid.data.astype(float)
    return (
        d[y0, x0] * (1 - fx) * (1 - fy)
        + d[y0, x1] * fx * (1 - fy)
        + d[y1, x0] * (1 - fx) * fy
        + d[y1, x1] * fx * fy
    )


def sample_matches(
    field: GroundTruthField, n: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Sample n valid field entries uniformly without replacement."""
    rows, cols = np.nonzero(field.valid)
    if n > rows.size:
        raise InsufficientValid(f"requested {n} matches, field has {rows.size} valid entries")
    rng = np.random.default_rng(seed)
    pick = rng.choice(rows.size, size=n, replace=False)
    out = []
    for idx in pick:
        r, c = int(rows[idx]), int(cols[idx])
        p_s = np.array([c * field.stride, r * field.stride], dtype=float)
        out.append((p_s, field.target[r, c].copy(), int(field.plane_id[r, c])))
    return out
