"""Aligned multispectral pairs: disk layout, synthetic generator, training
samples and pseudo-label files.

Dataset layout::

    root/spectrum_a/<id>.png
    root/spectrum_b/<id>.png
    root/labels/<id>.json      (optional)
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from . import geometry as geo
from .errors import BadLabelFile, ImageTooSmall, ShapeMismatch, UnpairedImage


@dataclass
class AlignedPair:
    id: str
    image_a: np.ndarray
    image_b: np.ndarray
    aligned: bool = True

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape:
            raise ShapeMismatch(f"pair {self.id}: {self.image_a.shape} vs {self.image_b.shape}")

    @property
    def dims(self):
        return self.image_a.shape

    def spectrum(self, which):
        return self.image_a if which == "a" else self.image_b


# ---------------------------------------------------------------- disk io

def read_gray(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read image {path}")
    scale = float(np.iinfo(img.dtype).max) if np.issubdtype(img.dtype, np.integer) else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        # BGR luminance
        img = img @ np.array([0.114, 0.587, 0.299])
    return img


def write_gray(path, img, bits=8):
    dtype = np.uint8 if bits == 8 else np.uint16
    top = np.iinfo(dtype).max
    data = np.rint(np.clip(img, 0.0, 1.0) * top).astype(dtype)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"cannot write {path}")


def list_pair_ids(root):
    root = Path(root)
    a_dir, b_dir = root / "spectrum_a", root / "spectrum_b"
    a = {p.stem: p for p in a_dir.glob("*.png")} if a_dir.is_dir() else {}
    b = {p.stem: p for p in b_dir.glob("*.png")} if b_dir.is_dir() else {}
    lonely = sorted(set(a) ^ set(b))
    if lonely:
        raise UnpairedImage(f"no partner for {lonely[0]!r}", ids=lonely)
    return sorted(a)


def load_pair(root, pair_id):
    root = Path(root)
    img_a = read_gray(root / "spectrum_a" / f"{pair_id}.png")
    img_b = read_gray(root / "spectrum_b" / f"{pair_id}.png")
    return AlignedPair(pair_id, img_a, img_b)


def load_dataset(root):
    """Lazily yield AlignedPairs in id order; pairing is checked up front."""
    ids = list_pair_ids(root)

    def gen():
        for pid in ids:
            yield load_pair(root, pid)
    return gen()


def save_pair(root, pair, bits=8):
    root = Path(root)
    write_gray(root / "spectrum_a" / f"{pair.id}.png", pair.image_a, bits)
    write_gray(root / "spectrum_b" / f"{pair.id}.png", pair.image_b, bits)


# ---------------------------------------------------------------- synthetic pairs

STYLES = ("thermal", "sparse")


def _random_polygon(rng, h, w):
    cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
    r = rng.uniform(0.06, 0.22) * min(h, w)
    n = int(rng.integers(3, 7))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = r * rng.uniform(0.6, 1.0, n)
    return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1).astype(np.int32)


def _render_regions(rng, h, w, n_shapes):
    labels = np.zeros((h, w), dtype=np.int32)
    rid = 1
    for _ in range(n_shapes):
        kind = rng.choice(["poly", "rect", "ellipse", "line"], p=[0.4, 0.25, 0.15, 0.2])
        canvas = np.zeros((h, w), dtype=np.uint8)
        if kind == "poly":
            cv2.fillPoly(canvas, [_random_polygon(rng, h, w)], 1)
        elif kind == "rect":
            x0, y0 = rng.integers(0, w - 8), rng.integers(0, h - 8)
            x1 = min(w - 1, x0 + rng.integers(8, max(9, w // 3)))
            y1 = min(h - 1, y0 + rng.integers(8, max(9, h // 3)))
            cv2.rectangle(canvas, (int(x0), int(y0)), (int(x1), int(y1)), 1, -1)
        elif kind == "ellipse":
            c = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            axes = (int(rng.integers(4, max(5, w // 6))), int(rng.integers(4, max(5, h // 6))))
            cv2.ellipse(canvas, c, axes, float(rng.uniform(0, 180)), 0, 360, 1, -1)
        else:
            p0 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            p1 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            cv2.line(canvas, p0, p1, 1, int(rng.integers(1, 4)))
        labels[canvas > 0] = rid
        rid += 1
    return labels, rid


def _scene(rng, h, w):
    return _render_regions(rng, h, w, int(rng.integers(10, 18)))


def synth_regions(seed, dims=(128, 128)):
    """Region label map shared by both spectra of ``synth_pair(seed, dims)``."""
    return _scene(np.random.default_rng(seed), *dims)[0]


def synth_pair(seed, dims=(128, 128), style="thermal", pair_id=None):
    """Render an aligned pair with a nonlinear, region-dependent intensity relation.

    Spectrum A is a piecewise-constant scene plus mild texture.  Spectrum B
    shares the geometry; each region's value passes through an inverted
    gamma curve, a random subset of regions is contrast-reversed, and the
    result is blurred and re-noised.  ``style="sparse"`` further blurs and
    flattens B so it yields fewer corners.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    h, w = dims
    rng = np.random.default_rng(seed)
    labels, n = _scene(rng, h, w)
    val_a = rng.uniform(0.05, 0.95, n)
    gamma = rng.uniform(0.5, 2.0)
    val_b = 1.0 - val_a ** gamma
    flip = rng.random(n) < 0.35
    val_b[flip] = val_a[flip] ** gamma
    tex_a = ndimage.gaussian_filter(rng.standard_normal((h, w)), 3.0)
    tex_b = ndimage.gaussian_filter(rng.standard_normal((h, w)), 3.0)
    img_a = val_a[labels] + 0.05 * tex_a / (np.abs(tex_a).max() + 1e-12)
    img_b = val_b[labels] + 0.05 * tex_b / (np.abs(tex_b).max() + 1e-12)
    img_a = ndimage.gaussian_filter(img_a, 0.5) + 0.01 * rng.standard_normal((h, w))
    if style == "sparse":
        img_b = ndimage.gaussian_filter(img_b, 2.0) + 0.01 * rng.standard_normal((h, w))
        img_b = 0.5 + 0.35 * (ndimage.gaussian_filter(img_b, 1.0) - 0.5)
    else:
        img_b = ndimage.gaussian_filter(img_b, 0.8) + 0.01 * rng.standard_normal((h, w))
    pid = pair_id if pair_id is not None else f"synth_{seed:06d}"
    return AlignedPair(pid, np.clip(img_a, 0, 1), np.clip(img_b, 0, 1))


def make_synthetic_dataset(root, n_pairs, dims=(128, 128), seed=0, style="thermal", start=0):
    root = Path(root)
    for i in range(start, start + n_pairs):
        pair = synth_pair(seed * 100003 + i, dims, style, pair_id=f"pair_{i:05d}")
        save_pair(root, pair)
    return root


# ---------------------------------------------------------------- labels

@dataclass
class LabelRecord:
    pair_id: str
    dims: tuple
    keypoints: np.ndarray  # (N, 3): row, col, score
    config: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "pair_id": self.pair_id,
            "dims": [int(d) for d in self.dims],
            "config": self.config,
            "keypoints": [[float(r), float(c), float(s)] for r, c, s in np.asarray(self.keypoints).reshape(-1, 3)],
        }

    @classmethod
    def from_json(cls, obj):
        try:
            kps = np.asarray(obj["keypoints"], dtype=np.float64).reshape(-1, 3)
            return cls(str(obj["pair_id"]), tuple(int(d) for d in obj["dims"]), kps, dict(obj.get("config", {})))
        except (KeyError, TypeError, ValueError) as e:
            raise BadLabelFile(str(e)) from e


def write_label(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.to_json(), sort_keys=True) + "\n")


def read_label(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise BadLabelFile(f"{path}: {e}") from e
    if not isinstance(obj, dict):
        raise BadLabelFile(f"{path}: expected an object")
    return LabelRecord.from_json(obj)


# ---------------------------------------------------------------- training samples

@dataclass
class TrainSampleConfig:
    crop_size: int = 256
    cross_spectrum_prob: float = 0.5
    warp_cfg: geo.HomographySampleConfig = field(default_factory=geo.HomographySampleConfig)


@dataclass
class TrainSample:
    src: np.ndarray
    dst: np.ndarray
    H_gt: np.ndarray
    labels_src: np.ndarray
    labels_dst: np.ndarray
    kps_src: np.ndarray
    kps_dst: np.ndarray
    spectra: tuple


def transform_keypoints(kps, H, size):
    """Warp (row, col, score) keypoints by H, round to pixels and drop out-of-frame ones."""
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 3)
    if len(kps) == 0:
        return kps
    xy, ok = geo.warp_points_masked(geo.kp_to_xy(kps), H)
    xy = np.rint(xy)
    keep = ok & geo.in_frame(np.nan_to_num(xy, nan=-1.0), size)
    return np.stack([xy[keep, 1], xy[keep, 0], kps[keep, 2]], axis=1)


def make_train_sample(pair, labels, cfg, rng):
    from .losses import cells_from_keypoints

    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    h, w = pair.dims
    c = cfg.crop_size
    if c % 8:
        raise ValueError("crop_size must be a multiple of 8")
    if h < c or w < c:
        raise ImageTooSmall(f"pair {pair.id} is {h}x{w}, crop is {c}")
    if rng.random() < cfg.cross_spectrum_prob:
        spectra = ("a", "b") if rng.random() < 0.5 else ("b", "a")
    else:
        s = "a" if rng.random() < 0.5 else "b"
        spectra = (s, s)
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    src = pair.spectrum(spectra[0])[y0:y0 + c, x0:x0 + c]
    dst_plain = pair.spectrum(spectra[1])[y0:y0 + c, x0:x0 + c]
    H = geo.sample_homography(cfg.warp_cfg, (c, c), rng)
    dst = geo.warp_image(dst_plain, H)

    kps_src = transform_keypoints(labels, geo.translation(-x0, -y0), (c, c))
    kps_dst = transform_keypoints(kps_src, H, (c, c))
    return TrainSample(
        src=src, dst=dst, H_gt=H,
        labels_src=cells_from_keypoints(kps_src, (c, c), rng),
        labels_dst=cells_from_keypoints(kps_dst, (c, c), rng),
        kps_src=kps_src, kps_dst=kps_dst, spectra=spectra,
    )


def pad_to_multiple(img, k=8):
    h, w = img.shape[:2]
    ph, pw = (-h) % k, (-w) % k
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw)), mode="symmetric")
