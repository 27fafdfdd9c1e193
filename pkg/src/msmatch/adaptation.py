"""Multispectral homographic adaptation: pseudo-ground-truth keypoints from
aligned image pairs.

Each trial warps both spectra by the same random homography, detects binary
keypoints in each, keeps only keypoints that the other spectrum confirms
within a Chebyshev window, and splats the survivors back into the source
frame.  Acceptances are averaged over trials and thresholded at the end.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from . import geometry as geo
from .errors import ShapeMismatch
from .matching import greedy_nms

log = logging.getLogger(__name__)


class ShiTomasiDetector:
    """Minimum-eigenvalue corner response scaled to [0, 1] by its image maximum."""

    name = "shi-tomasi"

    def __init__(self, block_size=3, ksize=3, floor=1e-10):
        self.block_size = block_size
        self.ksize = ksize
        self.floor = floor

    def detect(self, img):
        img = np.ascontiguousarray(img, dtype=np.float32)
        r = cv2.cornerMinEigenVal(img, self.block_size, ksize=self.ksize,
                                  borderType=cv2.BORDER_REFLECT).astype(np.float64)
        r = np.clip(r, 0.0, None)
        peak = r.max()
        if peak <= self.floor:
            return np.zeros_like(r)
        return r / peak


class HarrisDetector(ShiTomasiDetector):
    name = "harris"

    def __init__(self, block_size=3, ksize=3, k=0.04, floor=1e-10):
        super().__init__(block_size, ksize, floor)
        self.k = k

    def detect(self, img):
        img = np.ascontiguousarray(img, dtype=np.float32)
        r = cv2.cornerHarris(img, self.block_size, self.ksize, self.k,
                             borderType=cv2.BORDER_REFLECT).astype(np.float64)
        r = np.clip(r, 0.0, None)
        peak = r.max()
        return np.zeros_like(r) if peak <= self.floor else r / peak


DETECTORS = {"shi-tomasi": ShiTomasiDetector, "harris": HarrisDetector}


def make_detector(name):
    return DETECTORS[name]()


@dataclass
class AdaptationConfig:
    n_homographies: int = 100
    window_radius: int = 2
    accept_threshold: float = 0.3
    det_threshold: float = 0.05
    nms_radius: int = 4
    mode: str = "window"  # or "gaussian" (elementwise product + smoothing)
    gaussian_sigma: float = 1.0
    detector: str = "shi-tomasi"
    max_points: int = 1000
    label_nms_radius: int = 0  # merge accepted keypoints closer than this (0: keep all)
    sample_cfg: geo.HomographySampleConfig = field(
        default_factory=lambda: geo.HomographySampleConfig(center_crop_frac=0.1))

    def validate(self):
        if self.n_homographies < 1:
            raise ValueError("n_homographies must be >= 1")
        if self.window_radius < 0 or self.label_nms_radius < 0:
            raise ValueError("window_radius and label_nms_radius must be >= 0")
        if not 0.0 < self.accept_threshold <= 1.0:
            raise ValueError("accept_threshold must be in (0, 1]")
        if self.mode not in ("window", "gaussian"):
            raise ValueError(f"unknown adaptation mode {self.mode!r}")
        self.sample_cfg.validate()
        return self


def local_max_mask(score, radius):
    if radius <= 0:
        return np.ones(score.shape, dtype=bool)
    peak = ndimage.maximum_filter(score, size=2 * radius + 1, mode="constant", cval=0.0)
    return score >= peak


def detect_binary(detector, img, det_threshold, nms_radius=4):
    score = detector.detect(img)
    keep = (score >= det_threshold) & (score > 0) & local_max_mask(score, nms_radius)
    return keep.astype(np.float64)


def _dilate(mask, radius):
    if radius <= 0:
        return mask
    return ndimage.maximum_filter(mask, size=2 * radius + 1, mode="constant", cval=0.0)


def windowed_accept(map_a, map_b, window_radius):
    """Keep points of each map that the other map confirms within ``window_radius`` (Chebyshev)."""
    map_a = np.asarray(map_a, dtype=np.float64)
    map_b = np.asarray(map_b, dtype=np.float64)
    if map_a.shape != map_b.shape:
        raise ShapeMismatch(f"{map_a.shape} vs {map_b.shape}")
    a, b = map_a > 0, map_b > 0
    out_a = a & (_dilate(b.astype(np.uint8), window_radius) > 0)
    out_b = b & (_dilate(a.astype(np.uint8), window_radius) > 0)
    return out_a.astype(np.float64), out_b.astype(np.float64)


def splat_back(accepted, H):
    """Map nonzero pixels of ``accepted`` through ``H^-1`` onto the nearest source pixel."""
    h, w = accepted.shape
    out = np.zeros((h, w))
    rows, cols = np.nonzero(accepted)
    if rows.size == 0:
        return out
    xy, ok = geo.warp_points_masked(np.stack([cols, rows], axis=1), geo.inverse(H))
    xy = np.rint(xy[ok])
    inside = geo.in_frame(xy, (h, w))
    xy = xy[inside].astype(int)
    out[xy[:, 1], xy[:, 0]] = 1.0
    return out


def sample_trial_homographies(cfg, size, rng):
    hs = [np.eye(3)]
    for _ in range(cfg.n_homographies - 1):
        hs.append(geo.sample_homography(cfg.sample_cfg, size, rng))
    return hs


def _window_trial(img_a, img_b, H, detector, cfg):
    wa, wb = geo.warp_image(img_a, H), geo.warp_image(img_b, H)
    ka = detect_binary(detector, wa, cfg.det_threshold, cfg.nms_radius)
    kb = detect_binary(detector, wb, cfg.det_threshold, cfg.nms_radius)
    acc_a, acc_b = windowed_accept(ka, kb, cfg.window_radius)
    return splat_back(np.maximum(acc_a, acc_b), H)


def _gaussian_trial(img_a, img_b, H, detector, cfg):
    sa = detector.detect(geo.warp_image(img_a, H))
    sb = detector.detect(geo.warp_image(img_b, H))
    return geo.warp_image(sa * sb, geo.inverse(H))


def run_adaptation(img_a, img_b, detector, cfg, rng, workers=1):
    """Accumulated keypoint probability map in the frame of the aligned pair.

    The identity is always the first trial.  Trials whose detector raises
    contribute zeros.  Results are reduced in trial order, so ``workers``
    does not change the output.
    """
    cfg.validate()
    img_a = np.asarray(img_a, dtype=np.float64)
    img_b = np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ShapeMismatch(f"{img_a.shape} vs {img_b.shape}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    hs = sample_trial_homographies(cfg, img_a.shape, rng)
    trial = _window_trial if cfg.mode == "window" else _gaussian_trial

    def run(i):
        try:
            return trial(img_a, img_b, hs[i], detector, cfg)
        except Exception:
            log.exception("adaptation trial %d failed; counting it as empty", i)
            return np.zeros(img_a.shape)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, range(len(hs))))
    else:
        results = [run(i) for i in range(len(hs))]

    acc = np.zeros(img_a.shape)
    for r in results:
        acc += r
    prob = acc / len(hs)
    if cfg.mode == "gaussian":
        prob = ndimage.gaussian_filter(prob, cfg.gaussian_sigma, mode="reflect")
        peak = prob.max()
        prob = prob / peak if peak > 0 else prob
        prob = prob * local_max_mask(prob, cfg.nms_radius)
    prob[prob < cfg.accept_threshold] = 0.0
    return prob


def finalize_keypoints(prob, max_points=None, nms_radius=0):
    """Nonzero entries as an (N, 3) array of ``(row, col, score)``.

    Sorted by score descending, ties by (row, col) ascending.  With
    ``nms_radius > 0`` near-duplicates (e.g. the same corner accepted at
    slightly different positions in the two spectra) are merged greedily
    into the highest-scoring one.
    """
    prob = np.asarray(prob, dtype=np.float64)
    rows, cols = np.nonzero(prob)
    scores = prob[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]
    if nms_radius > 0:
        keep = greedy_nms(rows, cols, prob.shape, nms_radius)
        rows, cols, scores = rows[keep], cols[keep], scores[keep]
    kps = np.stack([rows, cols, scores], axis=1).astype(np.float64)
    if max_points is not None:
        kps = kps[:max_points]
    return kps.reshape(-1, 3)
