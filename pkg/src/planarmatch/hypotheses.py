"""Coarse stage: matching at 1/32 resolution, attribute fitting, loss gating.

Local 3x3 hypothesis neighborhoods are indexed 1..9 in row-major order
(dy outer, dx inner), so index 5 is the center unit.  All positions are
continuous pixel coordinates per the package convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllInvalid, DegenerateFit, OutOfModel, PointAtInfinity, SingularSystem
from .geometry import (
    BASE_QUAD,
    AttributeBounds,
    DEFAULT_BOUNDS,
    HomographyAttributes,
    apply_homography,
    attributes_to_homography,
    solve_homography_dlt,
)
from .scene import DescriptorGrid, PlanarScene, correspondences_at

# offsets of the 1..9 local neighborhood, row-major, center at index 5
LOCAL_OFFSETS = tuple((dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
CENTER_INDEX = 5


@dataclass
class PyramidConfig:
    """Grid geometry of the 1/32, 1/8 and 1/2 pyramid levels."""

    image_size: tuple[int, int]
    strides: tuple[int, int, int] = (32, 8, 2)

    def __post_init__(self):
        w, h = self.image_size
        if w % 32 or h % 32:
            raise ValueError("image size must be divisible by 32")

    def grid_size(self, stride: int) -> tuple[int, int]:
        w, h = self.image_size
        return w // stride, h // stride

    def cell_centers(self, stride: int) -> np.ndarray:
        """(gh, gw, 2) continuous centers of all cells at a stride."""
        gw, gh = self.grid_size(stride)
        xs = (np.arange(gw) + 0.5) * stride
        ys = (np.arange(gh) + 0.5) * stride
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass
class CoarseMatch:
    source_index: int  # flat row-major index into the 1/32 source grid
    target_cell: tuple[int, int]  # (ax, ay) grid coordinates of the best unit
    score: float  # cosine similarity


@dataclass
class LossGateConfig:
    theta1: float = 1.0  # grid cells
    gamma: float = 2.0
    alpha: float = 0.25
    descriptor_dim: int = 64
    groups: int = 8
    average_point_errors: bool = False


@dataclass
class HypothesisGrid:
    """One optional attribute block per 1/32 unit, p_s at the unit center."""

    grid_size: tuple[int, int]  # (gw, gh)
    attrs: list[HomographyAttributes | None]
    bounds: AttributeBounds = field(default_factory=AttributeBounds)
    _homographies: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        gw, gh = self.grid_size
        if len(self.attrs) != gw * gh:
            raise ValueError("attribute list does not match the grid size")

    @property
    def n_units(self) -> int:
        return self.grid_size[0] * self.grid_size[1]

    def is_valid(self, index: int) -> bool:
        return self.attrs[index] is not None

    def homography(self, index: int) -> np.ndarray | None:
        """Memoized homography of one unit, None when invalid."""
        if index not in self._homographies:
            a = self.attrs[index]
            if a is None:
                self._homographies[index] = None
            else:
                try:
                    self._homographies[index] = attributes_to_homography(a, self.bounds)
                except Exception:
                    self._homographies[index] = None
        return self._homographies[index]

    def neighborhood(self, cell: tuple[int, int]) -> list[int]:
        """Flat indices of the 3x3 neighborhood (1..9 order), -1 off grid."""
        gw, gh = self.grid_size
        cx, cy = cell
        out = []
        for dx, dy in LOCAL_OFFSETS:
            x, y = cx + dx, cy + dy
            out.append(y * gw + x if 0 <= x < gw and 0 <= y < gh else -1)
        return out

    def neighborhood_homographies(self, cell: tuple[int, int]) -> list[np.ndarray | None]:
        return [
            self.homography(i) if i >= 0 else None for i in self.neighborhood(cell)
        ]


def coarse_match(src: DescriptorGrid, tgt: DescriptorGrid) -> list[CoarseMatch]:
    """Best cosine target unit for every source unit (ties: lowest row-major)."""
    if src.dim != tgt.dim or src.level != tgt.level:
        raise ValueError("descriptor grids are not comparable")
    gh, gw = tgt.grid_shape
    s_flat = src.data.reshape(-1, src.dim).astype(float)
    t_flat = tgt.data.reshape(-1, tgt.dim).astype(float)
    sim = s_flat @ t_flat.T
    best = np.argmax(sim, axis=1)
    return [
        CoarseMatch(
            source_index=i,
            target_cell=(int(b % gw), int(b // gw)),
            score=float(sim[i, b]),
        )
        for i, b in enumerate(best)
    ]


def groupwise_correlation(
    f_i: np.ndarray, neighborhood: np.ndarray, groups: int = 8
) -> np.ndarray:
    """Group-sliced correlation of one descriptor against a 5x5 neighborhood.

    neighborhood is (25, dim) with zero rows for out-of-grid units.  For each
    neighbor the channels are split into `groups` contiguous slices and each
    slice contributes the mean of the elementwise products.  Returns the
    row-major concatenation, shape (25 * groups,).
    """
    f_i = np.asarray(f_i, dtype=float).reshape(-1)
    nb = np.asarray(neighborhood, dtype=float)
    dim = f_i.shape[0]
    if nb.shape != (25, dim):
        raise ValueError("neighborhood must be (25, dim)")
    if dim % groups:
        raise ValueError("descriptor dim must be divisible by the group count")
    prod = nb * f_i[None, :]
    per_group = prod.reshape(25, groups, dim // groups).mean(axis=2)
    return per_group.reshape(-1)


def _neighbor_window(grid: DescriptorGrid, cell: tuple[int, int], radius: int = 2):
    """(K, dim) descriptors and (K, 2) cell coords of a (2r+1)^2 window.

    Out-of-grid rows are zero descriptors with in_grid False.
    """
    gh, gw = grid.grid_shape
    cx, cy = cell
    size = 2 * radius + 1
    desc = np.zeros((size * size, grid.dim))
    cells = np.zeros((size * size, 2), dtype=int)
    in_grid = np.zeros(size * size, dtype=bool)
    k = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            x, y = cx + dx, cy + dy
            cells[k] = (x, y)
            if 0 <= x < gw and 0 <= y < gh:
                desc[k] = grid.data[y, x].astype(float)
                in_grid[k] = True
            k += 1
    return desc, cells, in_grid


def soft_target_position(
    scores: np.ndarray,
    cells: np.ndarray,
    in_grid: np.ndarray,
    stride: int,
    temperature: float = 0.5,
) -> np.ndarray:
    """Soft-argmax of correlation scores over neighbor cell centers (px)."""
    s = np.asarray(scores, dtype=float)
    logits = np.where(in_grid, s / temperature, -np.inf)
    logits = logits - np.max(logits)
    w = np.exp(logits)
    w /= w.sum()
    centers = (np.asarray(cells, dtype=float) + 0.5) * stride
    return w @ centers


def fit_attributes(
    src_pts: np.ndarray,
    tgt_pts: np.ndarray,
    center: np.ndarray,
    bounds: AttributeBounds = DEFAULT_BOUNDS,
) -> HomographyAttributes:
    """Deterministic attribute fit from local correspondences.

    Fits a least-squares homography over all matches, evaluates it at the
    four virtual corners around `center`, and inverts the corner composition:
    translation from the corner centroid, rotation from the 2x2 polar factor,
    scale from the Frobenius norm (the RMS corner radius ratio), perspective
    components from the residual matrix.  The (s, r, q) block is the
    canonical representative of its gauge orbit; the composed homography is
    what round-trips exactly.
    """
    src_pts = np.asarray(src_pts, dtype=float).reshape(-1, 2)
    tgt_pts = np.asarray(tgt_pts, dtype=float).reshape(-1, 2)
    center = np.asarray(center, dtype=float).reshape(2)
    if src_pts.shape[0] < 4:
        raise DegenerateFit("need at least 4 local matches")
    try:
        h = solve_homography_dlt(src_pts, tgt_pts)
    except SingularSystem as exc:
        raise DegenerateFit(str(exc)) from exc

    b_src = BASE_QUAD + center
    try:
        b_tgt = apply_homography(h, b_src)
    except PointAtInfinity as exc:
        raise DegenerateFit("virtual corners map to infinity") from exc

    p_t = b_tgt.mean(axis=0)
    centered = b_tgt - p_t
    a_mat = centered.T @ BASE_QUAD / 4.0  # least-squares affine corner map
    if np.linalg.det(a_mat) <= 0:
        raise OutOfModel("orientation-reversing corner map")
    r = float(np.arctan2(a_mat[1, 0] - a_mat[0, 1], a_mat[0, 0] + a_mat[1, 1]))
    s = float(np.linalg.norm(a_mat) / np.sqrt(2.0))
    if not (bounds.s_min <= s <= bounds.s_max):
        raise OutOfModel(f"fitted scale {s} out of bounds")
    cr, sr = np.cos(r), np.sin(r)
    rot_inv = np.array([[cr, sr], [-sr, cr]])
    m = rot_inv @ a_mat / s
    # M = [[1+dxy, dxx], [dyy, 1+dyx]]; q order is (dxx, dxy, dyx, dyy)
    q = np.array([m[0, 1], m[0, 0] - 1.0, m[1, 1] - 1.0, m[1, 0]])
    if np.max(np.abs(q)) > bounds.q_max:
        raise OutOfModel("fitted perspective components out of bounds")

    residual = np.sqrt(np.mean(np.sum((apply_homography(h, src_pts) - tgt_pts) ** 2, axis=1)))
    return HomographyAttributes(
        p_s=center, p_t=p_t, s=s, r=r, q=q, c=1.0 / (1.0 + residual)
    )


def build_hypothesis_grid_from_gt(
    scene: PlanarScene,
    pyramid: PyramidConfig,
    sample_stride: int = 4,
    bounds: AttributeBounds = DEFAULT_BOUNDS,
) -> HypothesisGrid:
    """Exact hypotheses: per-cell fits to analytic ground-truth matches."""
    gw, gh = pyramid.grid_size(32)
    attrs: list[HomographyAttributes | None] = []
    offs = np.arange(sample_stride // 2, 32, sample_stride, dtype=float)
    ox, oy = np.meshgrid(offs, offs)
    cell_pts = np.stack([ox.ravel(), oy.ravel()], axis=-1)
    for cy in range(gh):
        for cx in range(gw):
            src = cell_pts + np.array([cx * 32.0, cy * 32.0])
            tgt, _, ok = correspondences_at(scene, src)
            if ok.sum() < 4:
                attrs.append(None)
                continue
            center = np.array([(cx + 0.5) * 32.0, (cy + 0.5) * 32.0])
            try:
                attrs.append(fit_attributes(src[ok], tgt[ok], center, bounds))
            except (DegenerateFit, OutOfModel):
                attrs.append(None)
    return HypothesisGrid(grid_size=(gw, gh), attrs=attrs, bounds=bounds)


def build_hypothesis_grid_from_matches(
    matches: list[CoarseMatch],
    src: DescriptorGrid,
    tgt: DescriptorGrid,
    pyramid: PyramidConfig,
    groups: int = 8,
    loc_temperature: float = 0.5,
    bounds: AttributeBounds = DEFAULT_BOUNDS,
) -> HypothesisGrid:
    """Descriptor-driven hypotheses: group-wise correlation localizes each
    target position, then each unit fits attributes to the 3x3 neighborhood
    of (center, localized target) pairs."""
    gw, gh = pyramid.grid_size(32)
    if len(matches) != gw * gh:
        raise ValueError("matches do not cover the coarse grid")

    # continuous target position per unit via correlation soft-argmax
    p_t = np.zeros((gw * gh, 2))
    conf = np.zeros(gw * gh)
    for m in matches:
        i = m.source_index
        f_i = src.data.reshape(-1, src.dim)[i].astype(float)
        nb, cells, in_grid = _neighbor_window(tgt, m.target_cell, radius=2)
        corr = groupwise_correlation(f_i, nb, groups=groups)
        per_neighbor = corr.reshape(25, groups).mean(axis=1) * src.dim  # cosine
        p_t[i] = soft_target_position(per_neighbor, cells, in_grid, 32, loc_temperature)
        conf[i] = min(max(m.score, 0.0), 1.0)

    centers = pyramid.cell_centers(32).reshape(-1, 2)
    attrs: list[HomographyAttributes | None] = []
    for cy in range(gh):
        for cx in range(gw):
            i = cy * gw + cx
            idx = []
            for dx, dy in LOCAL_OFFSETS:
                x, y = cx + dx, cy + dy
                if 0 <= x < gw and 0 <= y < gh:
                    idx.append(y * gw + x)
            if len(idx) < 4:
                attrs.append(None)
                continue
            try:
                a = fit_attributes(centers[idx], p_t[idx], centers[i], bounds)
                a.c = conf[i]
                attrs.append(a)
            except (DegenerateFit, OutOfModel):
                attrs.append(None)
    return HypothesisGrid(grid_size=(gw, gh), attrs=attrs, bounds=bounds)


def hypothesis_point_error(h: np.ndarray, p_s: np.ndarray, p_t: np.ndarray) -> float:
    """L1 projection residual |H p_s - p_t|_1 in pixels."""
    proj = apply_homography(h, np.asarray(p_s, dtype=float))
    return float(np.sum(np.abs(proj - np.asarray(p_t, dtype=float))))


def assign_supervision_hypothesis(
    p_s: np.ndarray, p_t: np.ndarray, hyps: list[np.ndarray | None]
) -> int:
    """Index (1..9) of the neighborhood hypothesis with least L1 error.

    Ties prefer the center index 5, then the lowest index.  Hypotheses that
    are None or send the point to infinity are skipped.
    """
    if len(hyps) != 9:
        raise ValueError("expected exactly 9 hypotheses")
    errs = np.full(9, np.inf)
    for k, h in enumerate(hyps):
        if h is None:
            continue
        try:
            errs[k] = hypothesis_point_error(h, p_s, p_t)
        except PointAtInfinity:
            continue
    if not np.any(np.isfinite(errs)):
        raise AllInvalid("no usable hypothesis in the neighborhood")
    best = np.min(errs)
    tied = np.nonzero(errs == best)[0] + 1
    return CENTER_INDEX if CENTER_INDEX in tied else int(tied[0])


def loss_gate_partition(
    matches: list[CoarseMatch],
    gt_cells: np.ndarray,
    gt_valid: np.ndarray,
    cfg: LossGateConfig,
) -> tuple[list[int], list[int]]:
    """Split valid units by infinity-norm grid deviation against theta1.

    Returns (q1, q2): q1 gets the classification loss (deviation > theta1),
    q2 the correspondence loss.  Together they cover all valid units.
    """
    gt_cells = np.asarray(gt_cells, dtype=float).reshape(-1, 2)
    q1, q2 = [], []
    for m in matches:
        i = m.source_index
        if not gt_valid[i]:
            continue
        dev = max(
            abs(m.target_cell[0] - gt_cells[i, 0]), abs(m.target_cell[1] - gt_cells[i, 1])
        )
        (q1 if dev > cfg.theta1 else q2).append(i)
    return q1, q2


def coarse_loss(
    partition: tuple[list[int], list[int]],
    src: DescriptorGrid,
    tgt: DescriptorGrid,
    gt_cells: np.ndarray,
    grid: HypothesisGrid,
    sampled_points: list[tuple[np.ndarray, np.ndarray, int]],
    cfg: LossGateConfig,
) -> float:
    """Coarse supervision value: classification term over q1 units plus the
    summed L1 point errors of supervision points assigned to q2 units."""
    q1, q2 = partition
    gw, gh = grid.grid_size
    s_flat = src.data.reshape(-1, src.dim).astype(float)
    t_flat = tgt.data.reshape(-1, tgt.dim).astype(float)
    gt_cells = np.asarray(gt_cells, dtype=float).reshape(-1, 2)

    total = 0.0
    for i in q1:
        ax, ay = int(gt_cells[i, 0]), int(gt_cells[i, 1])
        total += 1.0 - float(s_flat[i] @ t_flat[ay * gw + ax])

    q2_set = set(q2)
    unit_sums: dict[int, list[float]] = {}
    for p_s, p_t, _ in sampled_points:
        cx = min(int(p_s[0] // 32), gw - 1)
        cy = min(int(p_s[1] // 32), gh - 1)
        neighborhood = grid.neighborhood((cx, cy))
        hyps = grid.neighborhood_homographies((cx, cy))
        try:
            local = assign_supervision_hypothesis(p_s, p_t, hyps)
        except AllInvalid:
            continue
        owner = neighborhood[local - 1]
        if owner not in q2_set:
            continue
        e_p = hypothesis_point_error(hyps[local - 1], p_s, p_t)
        unit_sums.setdefault(owner, []).append(e_p)

    for errs in unit_sums.values():
        total += float(np.mean(errs)) if cfg.average_point_errors else float(np.sum(errs))
    return total
