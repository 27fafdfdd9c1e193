"""Planar homographies: representations, conversions, sampling and warping.

Conventions used throughout the package:

* A homography is a 3x3 float64 array acting on pixel coordinates ``(x, y)``
  where ``x`` is the column and ``y`` the row.  Keypoint sets store
  ``(row, col, score)`` and are converted with :func:`kp_to_xy`.
* The image rectangle of a ``(height, width)`` frame has corners at pixel
  centers ``(0, 0)``, ``(W-1, 0)``, ``(W-1, H-1)``, ``(0, H-1)``, always in the
  order top-left, top-right, bottom-right, bottom-left (``CORNER_ORDER``).
* A four-point delta is a (4, 2) array of ``(du, dv)`` corner displacements in
  that same order.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateCorrespondences, DegenerateHomography, PointAtInfinity

CORNER_ORDER = "TL,TR,BR,BL"
EPS = 1e-12
MAX_RESAMPLE = 16


@dataclass
class HomographySampleConfig:
    translation_frac: float = 0.05
    scale_frac: float = 0.2
    rotation_deg: float = 90.0
    perspective_frac: float = 0.2
    center_crop_frac: float = 0.0
    truncation: float = 2.0

    def validate(self):
        for name in ("translation_frac", "scale_frac", "perspective_frac", "center_crop_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if not 0.0 <= self.rotation_deg <= 180.0:
            raise ValueError(f"rotation_deg must be in [0, 180], got {self.rotation_deg}")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        return self


def training_ranges(**overrides):
    return HomographySampleConfig(**overrides)


def eval_ranges(**overrides):
    kw = dict(translation_frac=0.05, scale_frac=0.1, rotation_deg=90.0,
              perspective_frac=0.05, center_crop_frac=0.0)
    kw.update(overrides)
    return HomographySampleConfig(**kw)


def zero_ranges():
    return HomographySampleConfig(0.0, 0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------- basics

def canonicalize(H):
    H = np.asarray(H, dtype=np.float64)
    if abs(H[2, 2]) > EPS:
        return H / H[2, 2]
    n = np.linalg.norm(H)
    return H / n if n > 0 else H


def is_invertible(H):
    return abs(np.linalg.det(canonicalize(H))) > EPS


def inverse(H):
    if not is_invertible(H):
        raise DegenerateHomography("matrix is singular")
    return canonicalize(np.linalg.inv(H))


def translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def image_corners(size):
    h, w = size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def kp_to_xy(kps):
    """(row, col[, score]) keypoint array -> (N, 2) array of (x, y)."""
    kps = np.asarray(kps, dtype=np.float64)
    if kps.size == 0:
        return np.zeros((0, 2))
    return kps[:, [1, 0]].copy()


def warp_points(pts, H):
    """Apply ``H`` to (N, 2) points ``(x, y)``.

    Raises PointAtInfinity if a point's third homogeneous coordinate vanishes.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    H = np.asarray(H, dtype=np.float64)
    hom = pts @ H[:, :2].T + H[:, 2]
    w = hom[:, 2]
    bad = np.flatnonzero(np.abs(w) <= EPS)
    if bad.size:
        i = int(bad[0])
        raise PointAtInfinity(f"point {i} {tuple(pts[i])} maps to infinity", index=i)
    return hom[:, :2] / w[:, None]


def warp_points_masked(pts, H):
    """Like :func:`warp_points` but returns ``(out, finite_mask)`` instead of raising."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    H = np.asarray(H, dtype=np.float64)
    hom = pts @ H[:, :2].T + H[:, 2]
    w = hom[:, 2]
    ok = np.abs(w) > EPS
    out = np.full((len(pts), 2), np.nan)
    out[ok] = hom[ok, :2] / w[ok, None]
    return out, ok


def in_frame(xy, size):
    h, w = size
    xy = np.asarray(xy).reshape(-1, 2)
    return ((xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)
            & np.isfinite(xy).all(axis=1))


# ---------------------------------------------------------------- DLT

def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d <= EPS:
        raise DegenerateCorrespondences("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def has_collinear_triple(pts, rel_tol=1e-9):
    pts = np.asarray(pts, dtype=np.float64)
    extent = np.ptp(pts, axis=0).max() if len(pts) else 0.0
    if extent <= EPS:
        return True
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b = pts[j] - pts[i], pts[k] - pts[i]
                if abs(a[0] * b[1] - a[1] * b[0]) <= rel_tol * extent * extent:
                    return True
    return False


def fit_homography(src, dst):
    """Normalized DLT from (N, 2) ``src`` to ``dst`` correspondences, N >= 4.

    Least squares in the algebraic sense for N > 4, exact for N == 4.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst) or len(src) < 4:
        raise DegenerateCorrespondences(f"need >= 4 paired points, got {len(src)}/{len(dst)}")
    T1, T2 = _hartley(src), _hartley(dst)
    s = src @ T1[:2, :2].T + T1[:2, 2]
    d = dst @ T2[:2, :2].T + T2[:2, 2]
    n = len(s)
    A = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    A[0::2, 0], A[0::2, 1], A[0::2, 2] = x, y, 1.0
    A[0::2, 6], A[0::2, 7], A[0::2, 8] = -u * x, -u * y, -u
    A[1::2, 3], A[1::2, 4], A[1::2, 5] = x, y, 1.0
    A[1::2, 6], A[1::2, 7], A[1::2, 8] = -v * x, -v * y, -v
    _, sv, vt = np.linalg.svd(A)
    # rank < 8 means the solution is not unique
    if sv[7] <= 1e-10 * sv[0]:
        raise DegenerateCorrespondences("DLT system is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    if not is_invertible(H):
        raise DegenerateCorrespondences("fitted homography is singular")
    return canonicalize(H)


# ---------------------------------------------------------------- 4-point

def four_point_from_matrix(H, size):
    corners = image_corners(size)
    return warp_points(corners, H) - corners


def matrix_from_four_point(deltas, size):
    deltas = np.asarray(deltas, dtype=np.float64).reshape(4, 2)
    if not np.isfinite(deltas).all():
        raise DegenerateCorrespondences("non-finite corner displacement")
    corners = image_corners(size)
    moved = corners + deltas
    if has_collinear_triple(moved):
        raise DegenerateCorrespondences("displaced corners contain a collinear triple")
    return fit_homography(corners, moved)


def to_list(H):
    """Row-major 9-element list (JSON form)."""
    return [float(v) for v in np.asarray(H, dtype=np.float64).reshape(9)]


def from_list(values):
    return np.asarray(values, dtype=np.float64).reshape(3, 3)


def four_point_to_list(deltas):
    return [float(v) for v in np.asarray(deltas, dtype=np.float64).reshape(8)]


def four_point_from_list(values):
    return np.asarray(values, dtype=np.float64).reshape(4, 2)


# ---------------------------------------------------------------- sampling

def _truncated_normal(rng, bound, truncation):
    if bound == 0:
        return 0.0
    while True:
        z = rng.standard_normal()
        if abs(z) <= truncation:
            return float(z * bound / truncation)


def _about(M, cx, cy):
    return translation(cx, cy) @ M @ translation(-cx, -cy)


def _usable(H, size):
    if not np.isfinite(H).all() or not is_invertible(H):
        return False
    corners = image_corners(size)
    w = corners @ H[2, :2] + H[2, 2]
    # all corners must stay on the same side of the horizon line
    return bool(np.all(w > EPS))


def sample_homography(cfg, size, rng):
    """Draw a random homography for a ``(height, width)`` frame.

    The result is ``crop @ perspective @ rotation @ scale @ translation``
    (translation acts first), every factor about the image center, each
    parameter drawn from a zero-mean normal truncated at the configured
    range.  Draw order: tx, ty, scale, angle, perspective x, perspective y.
    """
    cfg.validate()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"bad image size {size}")
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    tr = cfg.truncation
    for _ in range(MAX_RESAMPLE):
        tx = _truncated_normal(rng, cfg.translation_frac, tr) * w
        ty = _truncated_normal(rng, cfg.translation_frac, tr) * h
        s = 1.0 + _truncated_normal(rng, cfg.scale_frac, tr)
        ang = np.deg2rad(_truncated_normal(rng, cfg.rotation_deg, tr))
        px = _truncated_normal(rng, cfg.perspective_frac, tr) * w / 2.0
        py = _truncated_normal(rng, cfg.perspective_frac, tr) * h / 2.0

        T = translation(tx, ty)
        S = _about(np.diag([s, s, 1.0]), cx, cy)
        c, sn = np.cos(ang), np.sin(ang)
        R = _about(np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]]), cx, cy)
        if px == 0.0 and py == 0.0:
            P = np.eye(3)
        else:
            # top edge shrinks while the bottom grows, left shrinks while the right grows
            d = np.array([[px, py], [-px, -py], [px, py], [-px, -py]])
            try:
                P = matrix_from_four_point(d, size)
            except DegenerateCorrespondences:
                continue
        z = 1.0 / (1.0 - cfg.center_crop_frac)
        C = _about(np.diag([z, z, 1.0]), cx, cy)
        H = C @ P @ R @ S @ T
        if _usable(H, size):
            return canonicalize(H)
    raise DegenerateHomography(f"no usable sample after {MAX_RESAMPLE} draws")


# ---------------------------------------------------------------- images

def warp_image(img, H, order=1):
    """Inverse-map ``img`` through ``H`` with bilinear sampling.

    Reads outside the source are resolved by half-sample symmetric
    reflection (``dcba|abcd|dcba``).  Output has the input's shape.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    Hinv = inverse(H)
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src, ok = warp_points_masked(pts, Hinv)
    src[~ok] = 0.0
    out = ndimage.map_coordinates(img, [src[:, 1], src[:, 0]], order=order, mode="reflect")
    out[~ok] = 0.0
    return out.reshape(h, w)
