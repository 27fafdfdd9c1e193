"""Training losses and their label constructions."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry as geo
from .errors import KeypointOutOfBounds, NanLoss

log = logging.getLogger(__name__)

DUSTBIN = 64
CELL = 8
MATCH_RADIUS = 4.0


def default_class_weights(dustbin=1.0):
    w = [1.0] * 65
    w[DUSTBIN] = dustbin
    return w


@dataclass
class LossConfig:
    class_weights: list = field(default_factory=default_class_weights)
    lambda_d: float = 250.0
    m_p: float = 1.0
    m_n: float = 0.2
    lam: float = 0.0001
    gamma: float = 0.01
    weighted_mean: bool = True

    def validate(self):
        if len(self.class_weights) != 65 or min(self.class_weights) < 0:
            raise ValueError("class_weights must be 65 non-negative values")
        if min(self.lambda_d, self.lam, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.m_p > self.m_n:
            raise ValueError("m_p must exceed m_n")
        return self


def cells_from_keypoints(kps, dims, rng):
    """(N, 3) ``(row, col, score)`` keypoints -> (H/8, W/8) int grid of classes.

    Class ``8 * (row % 8) + (col % 8)``; empty cells get the dustbin (64).
    Coordinates are rounded to the nearest pixel; with several keypoints in
    one cell a uniformly random one wins.
    """
    h, w = dims
    hc, wc = h // CELL, w // CELL
    grid = np.full((hc, wc), DUSTBIN, dtype=np.int64)
    kps = np.asarray(kps, dtype=np.float64)
    if kps.size == 0:
        return grid
    rc = np.rint(kps[:, :2]).astype(np.int64)
    bad = (rc[:, 0] < 0) | (rc[:, 0] >= h) | (rc[:, 1] < 0) | (rc[:, 1] >= w)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise KeypointOutOfBounds(f"keypoint {i} at {tuple(kps[i, :2])} outside {h}x{w}", index=i)
    perm = rng.permutation(len(rc))
    rc = rc[perm]
    cell = (rc[:, 0] // CELL) * wc + rc[:, 1] // CELL
    _, first = np.unique(cell, return_index=True)
    r, c = rc[first, 0], rc[first, 1]
    grid[r // CELL, c // CELL] = CELL * (r % CELL) + c % CELL
    return grid


def decode_cells(grid):
    """Inverse of :func:`cells_from_keypoints` up to the random choice: (N, 2) ``(row, col)``."""
    hs, ws = np.nonzero(grid != DUSTBIN)
    cls = grid[hs, ws]
    return np.stack([hs * CELL + cls // CELL, ws * CELL + cls % CELL], axis=1)


def detector_loss(logits, labels, class_weights=None, weighted_mean=True):
    """Weighted cross-entropy over cells.

    ``logits`` (B, 65, Hc, Wc), ``labels`` (B, Hc, Wc).  With
    ``weighted_mean`` the weighted sum is divided by the sum of the weights
    applied to each cell; otherwise by the number of cells.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 3:
        logits, labels = logits[None], labels.reshape(1, *labels.shape[-2:])
    w = None if class_weights is None else torch.as_tensor(class_weights, dtype=logits.dtype)
    if weighted_mean:
        return F.cross_entropy(logits, labels, weight=w)
    nll = F.cross_entropy(logits, labels, reduction="none")
    if w is not None:
        nll = nll * w[labels]
    return nll.mean()


def cell_centers(hc, wc):
    """(Hc*Wc, 2) centers ``(x, y)`` = (8w + 3.5, 8h + 3.5), row-major cell order."""
    hh, ww = np.mgrid[0:hc, 0:wc]
    return np.stack([CELL * ww.ravel() + 3.5, CELL * hh.ravel() + 3.5], axis=1)


def correspondence_mask(H, dims, radius=MATCH_RADIUS):
    """(N, N) bool: warped center of cell i within ``radius`` px of center of cell j."""
    hc, wc = dims[0] // CELL, dims[1] // CELL
    centers = cell_centers(hc, wc)
    warped, ok = geo.warp_points_masked(centers, H)
    if not ok.all():
        log.warning("%d cell centers map to infinity; their rows are empty", int((~ok).sum()))
    d2 = ((warped[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    mask = np.zeros(d2.shape, dtype=bool)
    mask[ok] = d2[ok] <= radius * radius
    return mask


def descriptor_loss(d1, d2, s, cfg):
    """Hinge loss over all cell pairs of two (B, D, Hc, Wc) descriptor grids.

    ``s`` is (B, N, N) or (N, N) with N = Hc*Wc, cells in row-major order.
    """
    if d1.dim() == 3:
        d1, d2 = d1[None], d2[None]
    b, d = d1.shape[:2]
    s = torch.as_tensor(s, dtype=d1.dtype)
    if s.dim() == 2:
        s = s[None]
    dot = torch.bmm(d1.reshape(b, d, -1).transpose(1, 2), d2.reshape(b, d, -1))
    pos = cfg.lambda_d * s * F.relu(cfg.m_p - dot)
    neg = (1 - s) * F.relu(dot - cfg.m_n)
    return (pos + neg).mean()


def homography_loss(pred, gt):
    """Sum over the 4 corners of squared displacement error, averaged over the batch."""
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    diff = (pred - gt).reshape(-1, 4, 2)
    return (diff ** 2).sum(dim=(1, 2)).mean()


def total_loss(parts, cfg):
    """``parts``: dict with det1, det2, desc, homography."""
    for name in ("det1", "det2", "desc", "homography"):
        v = parts[name]
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise NanLoss(f"term {name} is {v}", term=name)
    return parts["det1"] + parts["det2"] + cfg.lam * parts["desc"] + cfg.gamma * parts["homography"]
