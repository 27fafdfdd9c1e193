"""Inference-time matching: keypoints from heatmaps, descriptor lookup,
mutual nearest neighbours and robust homography fitting."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import geometry as geo
from .errors import DegenerateCorrespondences, InsufficientMatches, NoConsensus


@dataclass
class MatchConfig:
    det_threshold: float = 0.015
    nms_radius: int = 4
    max_points: int = 1000


@dataclass
class RobustFitConfig:
    reproj_threshold: float = 2.0
    max_iterations: int = 2000
    confidence: float = 0.999
    min_matches: int = 4
    scoring: str = "inlier-count"  # or "truncated-quality"

    def validate(self):
        if self.reproj_threshold <= 0:
            raise ValueError("reproj_threshold must be positive")
        if self.min_matches < 4:
            raise ValueError("min_matches must be >= 4")
        if not 0 <= self.confidence < 1:
            raise ValueError("confidence must be in [0, 1)")
        if self.scoring not in ("inlier-count", "truncated-quality"):
            raise ValueError(f"unknown scoring {self.scoring!r}")
        return self


@dataclass
class MatchSet:
    pairs: np.ndarray  # (M, 2) int: index into set a, index into set b
    distances: np.ndarray  # (M,)
    inliers: np.ndarray = None

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0))


def greedy_nms(rows, cols, shape, radius):
    """Keep mask for candidates already sorted by priority; each kept point
    suppresses its Chebyshev ``radius`` neighbourhood."""
    taken = np.zeros(shape, dtype=bool)
    keep = np.zeros(len(rows), dtype=bool)
    for i, (y, x) in enumerate(zip(rows, cols)):
        if taken[y, x]:
            continue
        keep[i] = True
        taken[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = True
    return keep


def extract_keypoints(heatmap, det_threshold=0.015, nms_radius=4, max_points=1000):
    """Greedy NMS over pixels >= ``det_threshold``.

    Candidates are visited by score descending, then (row, col); each kept
    point suppresses its Chebyshev ``nms_radius`` neighbourhood.  Returns
    (N, 3) ``(row, col, score)``.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    rows, cols = np.nonzero(heatmap >= det_threshold)
    scores = heatmap[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]
    if nms_radius > 0:
        keep = greedy_nms(rows, cols, heatmap.shape, nms_radius)
        rows, cols, scores = rows[keep], cols[keep], scores[keep]
    kps = np.stack([rows, cols, scores], axis=1).astype(np.float64).reshape(-1, 3)
    return kps[:max_points] if max_points is not None else kps


def sample_descriptors(dense, kps):
    """Bilinear lookup in a (H, W, D) field at keypoint (row, col), renormalized."""
    dense = np.asarray(dense, dtype=np.float64)
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 3)
    h, w, d = dense.shape
    if len(kps) == 0:
        return np.zeros((0, d))
    r, c = kps[:, 0], kps[:, 1]
    r0 = np.clip(np.floor(r).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(c).astype(int), 0, w - 1)
    r1, c1 = np.minimum(r0 + 1, h - 1), np.minimum(c0 + 1, w - 1)
    fr, fc = (r - r0)[:, None], (c - c0)[:, None]
    out = ((1 - fr) * (1 - fc) * dense[r0, c0] + (1 - fr) * fc * dense[r0, c1]
           + fr * (1 - fc) * dense[r1, c0] + fr * fc * dense[r1, c1])
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norm, 1e-12)


def mutual_nn_match(da, db):
    """Pairs (i, j) that are each other's Euclidean nearest neighbour; ties go to the lower index."""
    da = np.asarray(da, dtype=np.float64)
    db = np.asarray(db, dtype=np.float64)
    if len(da) == 0 or len(db) == 0:
        return MatchSet.empty()
    dist = cdist(da, db)
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)
    ia = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(da)))
    ib = nn_ab[ia]
    return MatchSet(np.stack([ia, ib], axis=1).astype(np.int64), dist[ia, ib])


def _transfer_error(H, src, dst):
    proj, ok = geo.warp_points_masked(src, H)
    err = np.full(len(src), np.inf)
    err[ok] = np.linalg.norm(proj[ok] - dst[ok], axis=1)
    return err


def _score(err, thr, scoring):
    if scoring == "inlier-count":
        return float((err <= thr).sum())
    # truncated quadratic quality: 1 at zero error, 0 at and beyond the threshold
    e = np.minimum(err, thr)
    return float((1.0 - (e / thr) ** 2).sum())


def _needed_iterations(inlier_ratio, confidence, cap):
    if inlier_ratio <= 0:
        return cap
    p4 = inlier_ratio ** 4
    if p4 >= 1:
        return 1
    return min(cap, int(np.ceil(np.log(1 - confidence) / np.log(1 - p4))))


def robust_homography(kpa, kpb, matches, cfg, rng):
    """Hypothesize-and-verify from 4-point samples, refit on the consensus set.

    Returns ``(H, inlier_mask)`` with H mapping set-a pixels to set-b pixels.
    """
    cfg.validate()
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    n = len(matches)
    if n < cfg.min_matches:
        raise InsufficientMatches(f"{n} matches, need {cfg.min_matches}")
    src = geo.kp_to_xy(np.asarray(kpa)[matches.pairs[:, 0]])
    dst = geo.kp_to_xy(np.asarray(kpb)[matches.pairs[:, 1]])
    thr = cfg.reproj_threshold

    best_H, best_score, best_mask = None, -1.0, None
    needed = cfg.max_iterations
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if geo.has_collinear_triple(src[idx], 1e-6) or geo.has_collinear_triple(dst[idx], 1e-6):
            continue
        try:
            H = geo.fit_homography(src[idx], dst[idx])
        except DegenerateCorrespondences:
            continue
        err = _transfer_error(H, src, dst)
        score = _score(err, thr, cfg.scoring)
        if score > best_score:
            best_H, best_score, best_mask = H, score, err <= thr
            needed = max(it, _needed_iterations(best_mask.mean(), cfg.confidence, cfg.max_iterations))

    if best_mask is None or best_mask.sum() < 4:
        raise NoConsensus(f"best model has {0 if best_mask is None else int(best_mask.sum())} inliers")

    H, mask = best_H, best_mask
    for _ in range(5):
        try:
            H_new = geo.fit_homography(src[mask], dst[mask])
        except DegenerateCorrespondences:
            break
        mask_new = _transfer_error(H_new, src, dst) <= thr
        if mask_new.sum() < mask.sum():
            break
        stable = np.array_equal(mask_new, mask)
        H, mask = H_new, mask_new
        if stable:
            break
    matches.inliers = mask
    return geo.canonicalize(H), mask
