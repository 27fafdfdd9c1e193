"""Warped test-set generation, repeatability / matching score / corner
accuracy, and the end-to-end evaluation protocol."""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from . import network as net
from .datahub import pad_to_multiple
from .errors import InsufficientMatches, NoConsensus
from .matching import MatchConfig, RobustFitConfig, extract_keypoints, mutual_nn_match, robust_homography

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    pixel_tolerance: float = 5.0
    epsilons: list = field(default_factory=lambda: [float(e) for e in range(1, 11)])
    warp_cfg: geo.HomographySampleConfig = field(default_factory=geo.eval_ranges)
    seed: int = 0

    def validate(self):
        if self.pixel_tolerance <= 0:
            raise ValueError("pixel_tolerance must be positive")
        if list(self.epsilons) != sorted(self.epsilons):
            raise ValueError("epsilons must be sorted ascending")
        self.warp_cfg.validate()
        return self


@dataclass
class EvalPair:
    id: str
    image_1: np.ndarray  # fixed, spectrum a
    image_2: np.ndarray  # spectrum b warped by H_gt
    H_gt: np.ndarray


def make_eval_warps(pairs, cfg, self_pairs=False):
    """Keep spectrum A fixed and warp spectrum B by a per-pair seeded homography.

    With ``self_pairs`` the warped side is spectrum A as well (sanity runs).
    """
    cfg.validate()
    out = []
    for i, pair in enumerate(pairs):
        rng = np.random.default_rng([cfg.seed, i])
        H = geo.sample_homography(cfg.warp_cfg, pair.dims, rng)
        moving = pair.image_a if self_pairs else pair.image_b
        out.append(EvalPair(pair.id, pair.image_a, geo.warp_image(moving, H), H))
    return out


# ---------------------------------------------------------------- metrics

def _overlap(kp1, kp2, H, dims):
    """Warped positions and overlap masks: set 1 in frame 2 and set 2 in frame 1."""
    xy1 = geo.kp_to_xy(kp1)
    xy2 = geo.kp_to_xy(kp2)
    w1, ok1 = geo.warp_points_masked(xy1, H)
    w2, ok2 = geo.warp_points_masked(xy2, geo.inverse(H))
    keep1 = ok1 & geo.in_frame(xy1, dims) & geo.in_frame(np.nan_to_num(w1, nan=-1.0), dims)
    keep2 = ok2 & geo.in_frame(xy2, dims) & geo.in_frame(np.nan_to_num(w2, nan=-1.0), dims)
    return xy1, w1, keep1, xy2, w2, keep2


def repeatability(kp1, kp2, H_gt, dims, tol=5.0):
    """Fraction of overlap keypoints (both images) with a counterpart within ``tol`` px.

    A point of either set is compared in the other image's frame, which makes
    the ratio symmetric under swapping the sets together with H <-> H^-1.
    """
    xy1, w1, keep1, xy2, w2, keep2 = _overlap(kp1, kp2, H_gt, dims)
    n1, n2 = int(keep1.sum()), int(keep2.sum())
    if n1 == 0 or n2 == 0:
        # nothing can be repeated; covers the all-empty case too
        return 0.0
    d12 = np.linalg.norm(w1[keep1][:, None] - xy2[keep2][None], axis=-1)
    d21 = np.linalg.norm(w2[keep2][:, None] - xy1[keep1][None], axis=-1)
    rep = (d12 <= tol).any(axis=1).sum() + (d21 <= tol).any(axis=1).sum()
    return float(rep / (n1 + n2))


def matching_score(matches, kp1, kp2, H_gt, dims, tol=5.0):
    """Correct matches over overlap keypoints, averaged over the two images."""
    _, w1, keep1, xy2, _, keep2 = _overlap(kp1, kp2, H_gt, dims)
    n1, n2 = int(keep1.sum()), int(keep2.sum())
    if len(matches) == 0:
        return 0.0
    i, j = matches.pairs[:, 0], matches.pairs[:, 1]
    valid = keep1[i] & keep2[j]
    err = np.linalg.norm(np.nan_to_num(w1[i], nan=np.inf) - xy2[j], axis=1)
    correct = int((valid & (err <= tol)).sum())
    s1 = correct / n1 if n1 else 0.0
    s2 = correct / n2 if n2 else 0.0
    return 0.5 * (s1 + s2)


def corner_accuracy(H_est, H_gt, dims, epsilons):
    """Per threshold, fraction of the 4 image corners whose warps agree within it."""
    corners = geo.image_corners(dims)
    est, ok1 = geo.warp_points_masked(corners, H_est)
    gt, ok2 = geo.warp_points_masked(corners, H_gt)
    err = np.full(4, np.inf)
    ok = ok1 & ok2
    err[ok] = np.linalg.norm(est[ok] - gt[ok], axis=1)
    return np.array([(err <= e).mean() for e in epsilons])


# ---------------------------------------------------------------- pipelines

class NetworkPipeline:
    """Keypoints + descriptors from a trained network."""

    def __init__(self, model, match_cfg=None):
        self.model = model.eval()
        self.cfg = match_cfg or MatchConfig()

    @torch.no_grad()
    def heatmap_and_descriptors(self, img):
        h, w = img.shape
        x = net.to_tensor(pad_to_multiple(img))
        out = self.model(x)
        heat = net.logits_to_heatmap(out["logits"])[0, :h, :w].double().numpy()
        return heat, out["descriptors"][0]

    @torch.no_grad()
    def detect_and_describe(self, img):
        heat, coarse = self.heatmap_and_descriptors(img)
        kps = extract_keypoints(heat, self.cfg.det_threshold, self.cfg.nms_radius, self.cfg.max_points)
        if len(kps) == 0:
            return kps, np.zeros((0, coarse.shape[0]))
        # integer keypoints: identical to sampling the densified field at those pixels
        desc = net.coarse_to_points(coarse.double(), geo.kp_to_xy(kps))
        desc = torch.nn.functional.normalize(desc, dim=1).numpy()
        return kps, desc


@dataclass
class PairRecord:
    id: str
    repeatability: float
    matching_score: float
    corner_error: float
    corner_accuracy: list
    n_keypoints_1: int
    n_keypoints_2: int
    n_matches: int
    n_inliers: int
    fit_ok: bool


@dataclass
class EvalReport:
    pairs: list
    epsilons: list
    mean_repeatability: float = 0.0
    mean_matching_score: float = 0.0
    mean_corner_accuracy: list = None
    mean_keypoints: float = 0.0
    runtimes: dict = field(default_factory=dict)

    def aggregate(self):
        n = len(self.pairs)
        if n == 0:
            self.mean_corner_accuracy = [0.0] * len(self.epsilons)
            return self
        self.mean_repeatability = float(np.mean([p.repeatability for p in self.pairs]))
        self.mean_matching_score = float(np.mean([p.matching_score for p in self.pairs]))
        self.mean_corner_accuracy = [float(v) for v in np.mean([p.corner_accuracy for p in self.pairs], axis=0)]
        self.mean_keypoints = float(np.mean([(p.n_keypoints_1 + p.n_keypoints_2) / 2 for p in self.pairs]))
        return self

    def accuracy_at(self, eps):
        return self.mean_corner_accuracy[self.epsilons.index(float(eps))]

    def to_json(self):
        d = {k: v for k, v in asdict(self).items() if k != "runtimes"}
        for rec in d["pairs"]:
            if not np.isfinite(rec["corner_error"]):
                rec["corner_error"] = None  # failed fit; keep the JSON strict
        return d

    def write(self, out_dir):
        """report.json, pairs.csv, corner_accuracy.csv (deterministic) and timings.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(out / "pairs.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["id", "repeatability", "matching_score", "corner_error", "n_keypoints_1",
                         "n_keypoints_2", "n_matches", "n_inliers", "fit_ok"]
                        + [f"acc@{e:g}" for e in self.epsilons])
            for p in self.pairs:
                wr.writerow([p.id, repr(p.repeatability), repr(p.matching_score), repr(p.corner_error),
                             p.n_keypoints_1, p.n_keypoints_2, p.n_matches, p.n_inliers, int(p.fit_ok)]
                            + [repr(v) for v in p.corner_accuracy])
        with open(out / "corner_accuracy.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epsilon", "accuracy"])
            for e, a in zip(self.epsilons, self.mean_corner_accuracy):
                wr.writerow([f"{e:g}", repr(a)])
        (out / "timings.json").write_text(json.dumps(self.runtimes, indent=2, sort_keys=True) + "\n")

    def table(self):
        lines = [f"pairs               {len(self.pairs)}",
                 f"repeatability       {self.mean_repeatability:.4f}",
                 f"matching score      {self.mean_matching_score:.4f}",
                 f"mean keypoints      {self.mean_keypoints:.1f}"]
        for e, a in zip(self.epsilons, self.mean_corner_accuracy):
            lines.append(f"corner acc @ {e:>4g}  {a:.4f}")
        return "\n".join(lines)


def evaluate_pair(pipeline, ep, cfg, fit_cfg, fit_seed=0):
    dims = ep.image_1.shape
    kp1, d1 = pipeline.detect_and_describe(ep.image_1)
    kp2, d2 = pipeline.detect_and_describe(ep.image_2)
    ms = mutual_nn_match(d1, d2)
    rep = repeatability(kp1, kp2, ep.H_gt, dims, cfg.pixel_tolerance)
    msc = matching_score(ms, kp1, kp2, ep.H_gt, dims, cfg.pixel_tolerance)
    try:
        H_est, mask = robust_homography(kp1, kp2, ms, fit_cfg, np.random.default_rng(fit_seed))
        acc = corner_accuracy(H_est, ep.H_gt, dims, cfg.epsilons)
        c = geo.image_corners(dims)
        cerr = float(np.linalg.norm(geo.warp_points(c, H_est) - geo.warp_points(c, ep.H_gt), axis=1).mean())
        n_in, ok = int(mask.sum()), True
    except (InsufficientMatches, NoConsensus) as e:
        log.info("pair %s: robust fit failed (%s)", ep.id, e)
        acc = np.zeros(len(cfg.epsilons))
        cerr, n_in, ok = float("inf"), 0, False
    return PairRecord(ep.id, rep, msc, cerr, [float(a) for a in acc], len(kp1), len(kp2), len(ms), n_in, ok)


def run_protocol(pipeline, eval_pairs, cfg, fit_cfg=None):
    """Evaluate ``pipeline`` on pre-warped pairs (see :func:`make_eval_warps`)."""
    cfg.validate()
    fit_cfg = fit_cfg or RobustFitConfig()
    records, runtimes = [], {}
    for i, ep in enumerate(eval_pairs):
        t0 = time.perf_counter()
        records.append(evaluate_pair(pipeline, ep, cfg, fit_cfg, fit_seed=cfg.seed * 7919 + i))
        runtimes[ep.id] = time.perf_counter() - t0
    report = EvalReport(records, [float(e) for e in cfg.epsilons], runtimes=runtimes)
    return report.aggregate()
