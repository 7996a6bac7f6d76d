"""Homography parameterization, DLT solving, and plane-induced projective maps.

Conventions used throughout the package:

- Image coordinates are continuous, origin at the top-left corner, x right,
  y down.  A grid cell of size ``c`` with index ``k`` covers ``[k*c, (k+1)*c)``
  and has its center at ``(k + 0.5) * c``.
- Rotations ``r`` are counter-clockwise in a y-up mathematical frame.  Since
  image y points down, a positive ``r`` appears clockwise on screen.
- A camera pose ``(R, t)`` maps camera-1 coordinates into camera-2
  coordinates, ``X2 = R @ X1 + t``.
- Homography matrices are normalized so that ``m[2,2] == 1`` whenever
  ``|m[2,2]| > 1e-9``; otherwise they are scaled to unit Frobenius norm with
  the largest-magnitude entry made positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidHypothesis, PointAtInfinity, SingularSystem

# Reference corner square.  The row order (y-sign varies fastest) fixes the
# sign table of perspective_offsets.
BASE_QUAD = np.array(
    [
        [-1.0, -1.0],
        [-1.0, 1.0],
        [1.0, -1.0],
        [1.0, 1.0],
    ]
)

# A corner quad is degenerate when any three of its points span a triangle
# smaller than this (px^2).
MIN_TRIANGLE_AREA = 1e-6

# Rank-deficiency guard for the DLT nullspace solve.
SINGULAR_RATIO = 1e-10

_W_EPS = 1e-9  # homogeneous scale below this is "at infinity"


@dataclass
class AttributeBounds:
    """Validity box for hypothesis attributes."""

    s_min: float = 0.125
    s_max: float = 8.0
    q_max: float = 0.45


DEFAULT_BOUNDS = AttributeBounds()


@dataclass
class HomographyAttributes:
    """Per-unit hypothesis parameter block.

    p_s / p_t are source/target anchor positions in pixels, s a scale
    factor, r a rotation in radians, q the four perspective offsets
    (dxx, dxy, dyx, dyy) and c a confidence in [0, 1].
    """

    p_s: np.ndarray
    p_t: np.ndarray
    s: float
    r: float
    q: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.p_s = np.asarray(self.p_s, dtype=float).reshape(2)
        self.p_t = np.asarray(self.p_t, dtype=float).reshape(2)
        self.q = np.asarray(self.q, dtype=float).reshape(4)

    def as_vector(self) -> np.ndarray:
        """Flatten to the 10-float serialization order (c excluded)."""
        return np.concatenate(
            [self.p_s, self.p_t, [self.s, self.r], self.q]
        )

    @classmethod
    def from_vector(cls, v: np.ndarray, c: float = 1.0) -> "HomographyAttributes":
        v = np.asarray(v, dtype=float).reshape(10)
        return cls(p_s=v[0:2], p_t=v[2:4], s=float(v[4]), r=float(v[5]), q=v[6:10], c=c)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class CameraPose:
    """Rigid map from camera-1 coordinates to this camera's coordinates."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-9:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(R=np.eye(3), t=np.zeros(3))


@dataclass
class Plane3D:
    """Plane {X : n . X = d} in the camera-1 frame, with unit n and d > 0."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float).reshape(3)
        if abs(np.linalg.norm(self.n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        if not self.d > 0:
            raise ValueError("plane distance must be positive")


def validate_attributes(attrs: HomographyAttributes, bounds: AttributeBounds = DEFAULT_BOUNDS) -> None:
    """Raise InvalidHypothesis unless attrs satisfies its invariants."""
    vec = attrs.as_vector()
    if not np.all(np.isfinite(vec)):
        raise InvalidHypothesis("non-finite attribute")
    if not (bounds.s_min <= attrs.s <= bounds.s_max):
        raise InvalidHypothesis(f"scale {attrs.s} outside [{bounds.s_min}, {bounds.s_max}]")
    if np.max(np.abs(attrs.q)) > bounds.q_max:
        raise InvalidHypothesis(f"perspective component exceeds {bounds.q_max}")
    if not (0.0 <= attrs.c <= 1.0):
        raise InvalidHypothesis(f"confidence {attrs.c} outside [0, 1]")


def perspective_offsets(q: np.ndarray, q_max: float = DEFAULT_BOUNDS.q_max) -> np.ndarray:
    """Corner offsets induced by the perspective components.

    Returns the 4x2 offset table for the rows of BASE_QUAD:

        [-dxx - dxy, -dyx - dyy]
        [ dxx - dxy,  dyx - dyy]
        [-dxx + dxy, -dyx + dyy]
        [ dxx + dxy,  dyx + dyy]

    Note the dxx/dyx columns follow the y-sign of the base corner; the table
    is implemented verbatim.
    """
    q = np.asarray(q, dtype=float).reshape(4)
    if np.max(np.abs(q)) > q_max:
        raise InvalidHypothesis(f"perspective component exceeds {q_max}")
    dxx, dxy, dyx, dyy = q
    return np.array(
        [
            [-dxx - dxy, -dyx - dyy],
            [dxx - dxy, dyx - dyy],
            [-dxx + dxy, -dyx + dyy],
            [dxx + dxy, dyx + dyy],
        ]
    )


def rotate_about_centroid(pts: np.ndarray, r: float) -> np.ndarray:
    """Rotate a point set about its centroid by r radians (CCW, y-up)."""
    pts = np.asarray(pts, dtype=float)
    c = pts.mean(axis=0)
    cr, sr = np.cos(r), np.sin(r)
    rot = np.array([[cr, -sr], [sr, cr]])
    return (pts - c) @ rot.T + c


def min_triangle_area(quad: np.ndarray) -> float:
    """Smallest triangle area over all point triples of a 4-point quad."""
    quad = np.asarray(quad, dtype=float)
    best = np.inf
    for i in range(4):
        tri = np.delete(quad, i, axis=0)
        a = tri[1] - tri[0]
        b = tri[2] - tri[0]
        area = 0.5 * abs(a[0] * b[1] - a[1] * b[0])
        best = min(best, area)
    return best


def attributes_to_virtual_corners(
    attrs: HomographyAttributes, bounds: AttributeBounds = DEFAULT_BOUNDS
) -> tuple[np.ndarray, np.ndarray]:
    """Convert an attribute block into its source/target corner quads.

    Composition order: perspective offsets, rotation about the centroid,
    scaling, translation to p_t.
    """
    validate_attributes(attrs, bounds)
    b_src = BASE_QUAD + attrs.p_s
    shaped = rotate_about_centroid(BASE_QUAD + perspective_offsets(attrs.q, bounds.q_max), attrs.r)
    b_tgt = attrs.p_t + shaped * attrs.s
    if min_triangle_area(b_tgt) <= MIN_TRIANGLE_AREA:
        raise InvalidHypothesis("target corner quad is degenerate")
    return b_src, b_tgt


def normalize_homography(h: np.ndarray) -> np.ndarray:
    """Apply the package-wide scale normalization convention."""
    h = np.asarray(h, dtype=float).reshape(3, 3)
    if abs(h[2, 2]) > 1e-9:
        return h / h[2, 2]
    h = h / np.linalg.norm(h)
    flat = h.ravel()
    lead = flat[np.argmax(np.abs(flat))]
    return h if lead >= 0 else -h


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform sending pts to centroid 0 and RMS radius sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    if rms < 1e-12:
        raise SingularSystem("all correspondence points coincide")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def solve_homography_dlt(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Estimate the homography mapping src points onto tgt points.

    Uses Hartley normalization followed by an SVD nullspace solve of the
    stacked 2Nx9 system.  Exactly four correspondences give the classic
    8x9 solve.  Raises SingularSystem when the corner layout is degenerate
    (three collinear points, or a rank-deficient system).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=float).reshape(-1, 2)
    if src.shape[0] < 4 or src.shape != tgt.shape:
        raise ValueError("need at least 4 matched points")
    if src.shape[0] == 4:
        if min_triangle_area(src) <= MIN_TRIANGLE_AREA or min_triangle_area(tgt) <= MIN_TRIANGLE_AREA:
            raise SingularSystem("three corners are collinear")

    t_src = _hartley_normalization(src)
    t_tgt = _hartley_normalization(tgt)
    ones = np.ones((src.shape[0], 1))
    sn = np.hstack([src, ones]) @ t_src.T
    tn = np.hstack([tgt, ones]) @ t_tgt.T

    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = tn[:, 0], tn[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v

    _, sing, vt = np.linalg.svd(a)
    # With 4 points the system is 8x9 and the 9th singular value is the
    # structural zero of the nullspace; sing[7] ~ 0 therefore means a second
    # nullspace direction, i.e. the solution is not unique.
    if sing[7] < SINGULAR_RATIO * sing[0]:
        raise SingularSystem("DLT system is rank deficient")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_tgt) @ h_norm @ t_src
    h = normalize_homography(h)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise SingularSystem("solved homography is singular")
    return h


def attributes_to_homography(
    attrs: HomographyAttributes, bounds: AttributeBounds = DEFAULT_BOUNDS
) -> np.ndarray:
    """Build the 3x3 homography encoded by an attribute block."""
    b_src, b_tgt = attributes_to_virtual_corners(attrs, bounds)
    return solve_homography_dlt(b_src, b_tgt)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map one point (2,) or a batch (N, 2) through a homography."""
    h = np.asarray(h, dtype=float)
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    p = pts.reshape(-1, 2)
    hom = np.hstack([p, np.ones((p.shape[0], 1))]) @ h.T
    w = hom[:, 2]
    if np.any(np.abs(w) < _W_EPS):
        raise PointAtInfinity("homogeneous scale vanished")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


def apply_homography_masked(h: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch variant that flags points at infinity instead of raising."""
    h = np.asarray(h, dtype=float)
    p = np.asarray(pts, dtype=float).reshape(-1, 2)
    hom = np.hstack([p, np.ones((p.shape[0], 1))]) @ h.T
    w = hom[:, 2]
    ok = np.abs(w) >= _W_EPS
    out = np.full_like(p, np.nan)
    out[ok] = hom[ok, :2] / w[ok, None]
    return out, ok


def plane_induced_homography(
    k1: CameraIntrinsics,
    k2: CameraIntrinsics,
    pose: CameraPose,
    plane: Plane3D,
) -> np.ndarray:
    """Homography generated by a 3D plane between two calibrated views.

    H = K2 (R + t n^T / d) K1^{-1}, normalized.
    """
    core = pose.R + np.outer(pose.t, plane.n) / plane.d
    h = normalize_homography(k2.matrix @ core @ k1.inverse)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise SingularSystem("plane-induced homography is rank deficient")
    return h
