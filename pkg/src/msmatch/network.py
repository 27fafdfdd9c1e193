"""Shared encoder with interest-point, descriptor and homography-regression heads.

Tensors are NCHW.  An encoder maps ``(B, 1, H, W)`` images to a
``(B, C_f, H/8, W/8)`` feature map; every head reads that same map.
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadInputDims, ManifestMismatch, ShapeMismatch

CELL = 8
IN_CELL_ORDER = "row-major"
CORNER_ORDER = "TL,TR,BR,BL"
FORMAT_VERSION = "1"


def _norm(kind, c):
    if kind == "batch":
        return nn.BatchNorm2d(c)
    if kind == "group":
        return nn.GroupNorm(math.gcd(8, c), c)
    raise ValueError(f"unknown norm {kind!r}")


def _block(cin, cout, stride=1, norm="group"):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    """Four conv stages, three stride-2 reductions.

    Stand-in for a heavier backbone; anything honoring ``channels`` and the
    H/8 x W/8 output contract can replace it.
    """

    name = "conv4"

    def __init__(self, channels=128, widths=(16, 32, 64), norm="group"):
        super().__init__()
        w1, w2, w3 = widths
        self.channels = channels
        b = lambda cin, cout, stride=1: _block(cin, cout, stride, norm)
        self.stages = nn.Sequential(
            b(1, w1),
            nn.Sequential(b(w1, w2, 2), b(w2, w2)),
            nn.Sequential(b(w2, w3, 2), b(w3, w3)),
            nn.Sequential(b(w3, channels, 2), b(channels, channels)),
        )

    def forward(self, x):
        return self.stages(x - 0.5)


ENCODERS = {ConvEncoder.name: ConvEncoder}


def check_dims(x):
    h, w = x.shape[-2:]
    if h % CELL or w % CELL or h == 0 or w == 0:
        raise BadInputDims(f"image dims {h}x{w} are not positive multiples of {CELL}")


def cost_volume(x1, x2, eps=1e-8):
    """Cosine similarity between every location of ``x1`` and of ``x2``.

    ``x1``, ``x2``: (B, L, K) -> (B, L, L).  Zero vectors score 0.
    """
    if x1.shape != x2.shape:
        raise ShapeMismatch(f"{tuple(x1.shape)} vs {tuple(x2.shape)}")
    n1 = x1 / (x1.norm(dim=-1, keepdim=True) + eps)
    n2 = x2 / (x2.norm(dim=-1, keepdim=True) + eps)
    return torch.bmm(n1, n2.transpose(1, 2))


class HomographyHead(nn.Module):
    """Siamese conv-BN-ReLU-maxpool, cost volume, pooled to a fixed grid, two FC layers.

    Predicts corner displacements in input pixels; the last layer's output is
    multiplied by ``delta_scale``.
    """

    def __init__(self, channels=128, mid=64, pool=16, hidden=1024, dropout=0.5, delta_scale=32.0):
        super().__init__()
        self.layer1 = nn.Sequential(
            nn.Conv2d(channels, mid, 3, padding=1),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2, ceil_mode=True),
        )
        self.pool = pool
        self.fc = nn.Sequential(
            nn.Linear(pool * pool, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(hidden, 8),
        )
        self.delta_scale = delta_scale

    def forward(self, f1, f2):
        if f1.shape != f2.shape:
            raise ShapeMismatch(f"{tuple(f1.shape)} vs {tuple(f2.shape)}")
        g1, g2 = self.layer1(f1), self.layer1(f2)
        b = g1.shape[0]
        cv = cost_volume(g1.flatten(2).transpose(1, 2), g2.flatten(2).transpose(1, 2))
        cv = F.adaptive_avg_pool2d(cv.unsqueeze(1), self.pool).flatten(1)
        return (self.fc(cv) * self.delta_scale).view(b, 4, 2)


@dataclass
class ModelConfig:
    encoder: str = "conv4"
    channels: int = 128
    encoder_widths: tuple = (16, 32, 64)
    encoder_norm: str = "group"
    descriptor_dim: int = 256
    head_mid: int = 64
    head_pool: int = 16
    head_hidden: int = 1024
    head_dropout: float = 0.5
    delta_scale: float = 32.0


class MatchNet(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.encoder = ENCODERS[cfg.encoder](cfg.channels, tuple(cfg.encoder_widths), cfg.encoder_norm)
        self.detector = nn.Conv2d(cfg.channels, 65, 1)
        self.descriptor = nn.Conv2d(cfg.channels, cfg.descriptor_dim, 1)
        self.homography = HomographyHead(cfg.channels, cfg.head_mid, cfg.head_pool, cfg.head_hidden,
                                         cfg.head_dropout, cfg.delta_scale)

    def encode(self, img):
        check_dims(img)
        return self.encoder(img)

    def detect_head(self, feats):
        return self.detector(feats)

    def describe_head(self, feats):
        return F.normalize(self.descriptor(feats), dim=1)

    def forward(self, img):
        feats = self.encode(img)
        return {"features": feats, "logits": self.detect_head(feats), "descriptors": self.describe_head(feats)}

    def forward_pair(self, img1, img2):
        out1, out2 = self(img1), self(img2)
        deltas = self.homography(out1["features"], out2["features"])
        return out1, out2, deltas

    def n_params(self):
        return sum(p.numel() for p in self.parameters())


def logits_to_heatmap(logits):
    """(B, 65, Hc, Wc) logits -> (B, H, W) keypoint probabilities.

    Channel ``c`` of cell ``(h, w)`` lands on pixel ``(8h + c // 8, 8w + c % 8)``;
    the dustbin channel is dropped.
    """
    prob = F.softmax(logits, dim=1)[:, :64]
    return F.pixel_shuffle(prob, CELL)[:, 0]


def densify_descriptors(coarse):
    """(B, D, Hc, Wc) -> (B, D, 8Hc, 8Wc) unit descriptors.

    Bicubic with half-pixel alignment: coarse cell ``h`` sits at dense pixel ``8h + 3.5``.
    """
    dense = F.interpolate(coarse, scale_factor=CELL, mode="bicubic", align_corners=False)
    return F.normalize(dense, dim=1)


def coarse_to_points(coarse, xy):
    """Bicubic value of the (unnormalized) dense field at float pixel positions.

    ``coarse``: (D, Hc, Wc); ``xy``: (N, 2) pixels ``(x, y)`` -> (N, D).
    Agrees with :func:`densify_descriptors` before its renormalization.
    """
    d, hc, wc = coarse.shape
    xy = torch.as_tensor(xy, dtype=coarse.dtype)
    gx = (xy[:, 0] + 0.5) / (CELL * wc) * 2 - 1
    gy = (xy[:, 1] + 0.5) / (CELL * hc) * 2 - 1
    grid = torch.stack([gx, gy], dim=-1).view(1, 1, -1, 2)
    out = F.grid_sample(coarse[None], grid, mode="bicubic", align_corners=False, padding_mode="border")
    return out[0, :, 0].T


# ---------------------------------------------------------------- checkpoints

def manifest_for(model):
    cfg = model.cfg
    return {
        "encoder": cfg.encoder,
        "channels": cfg.channels,
        "descriptor_dim": cfg.descriptor_dim,
        "in_cell_order": IN_CELL_ORDER,
        "corner_order": CORNER_ORDER,
        "format_version": FORMAT_VERSION,
        "model_config": asdict(cfg),
    }


def save_checkpoint(path, model, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = manifest_for(model)
    if extra:
        manifest.update(extra)
    torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)
    path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def validate_manifest(manifest):
    for key, want in (("in_cell_order", IN_CELL_ORDER), ("corner_order", CORNER_ORDER),
                      ("format_version", FORMAT_VERSION)):
        if manifest.get(key) != want:
            raise ManifestMismatch(f"{key}={manifest.get(key)!r}, expected {want!r}")
    if manifest.get("encoder") not in ENCODERS:
        raise ManifestMismatch(f"unknown encoder {manifest.get('encoder')!r}")


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    manifest = blob.get("manifest", {})
    validate_manifest(manifest)
    model = MatchNet(ModelConfig(**manifest["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest


def to_tensor(img):
    """(H, W) numpy image -> (1, 1, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
