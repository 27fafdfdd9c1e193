"""Command-line entry point: synth, label, train, eval, match, register.

Every command writes ``manifest.json`` (command, arguments, full config,
package version) into its output directory.  Exit codes: 0 success,
2 config error, 3 data error, 4 no consensus.
"""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from . import geometry as geo
from .adaptation import finalize_keypoints, make_detector, run_adaptation
from .config import load_config, save_config
from .datahub import LabelRecord, load_dataset, make_synthetic_dataset, read_gray, read_label, write_label
from .errors import (BadLabelFile, ConfigError, ImageTooSmall, InsufficientMatches, ManifestMismatch, NoConsensus,
                     ShapeMismatch, UnpairedImage)
from .evaluation import NetworkPipeline, make_eval_warps, run_protocol
from .matching import mutual_nn_match, robust_homography
from .network import MatchNet, load_checkpoint
from .training import train

log = logging.getLogger("msmatch")

EXIT_CONFIG, EXIT_DATA, EXIT_CONSENSUS = 2, 3, 4
DATA_ERRORS = (UnpairedImage, ShapeMismatch, BadLabelFile, ImageTooSmall, ManifestMismatch, OSError)


def write_manifest(out, command, args, cfg, extra=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    man = {"command": command, "version": __version__, "seed": cfg.seed,
           "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}, "config": cfg.to_dict()}
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")
    save_config(cfg, out / "config.json")


def resolve_config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "det_threshold", None) is not None:
        cfg.match.det_threshold = args.det_threshold
    if getattr(args, "nms_radius", None) is not None:
        cfg.match.nms_radius = args.nms_radius
    if getattr(args, "reproj_threshold", None) is not None:
        cfg.fit.reproj_threshold = args.reproj_threshold
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    return cfg.validate()


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    make_synthetic_dataset(args.out, args.n_pairs, (args.height, args.width), cfg.seed, args.style, args.start)
    write_manifest(args.out, "synth", args, cfg)
    print(f"wrote {args.n_pairs} pairs to {args.out}")


def cmd_label(args, cfg):
    out = Path(args.out)
    detector = make_detector(cfg.adaptation.detector)
    total, files = 0, 0
    for idx, pair in enumerate(load_dataset(args.dataset)):
        rng = np.random.default_rng([cfg.seed, idx])
        try:
            prob = run_adaptation(pair.image_a, pair.image_b, detector, cfg.adaptation, rng, workers=cfg.workers)
        except Exception:
            print(f"labelling failed on pair {pair.id}", file=sys.stderr)
            raise
        kps = finalize_keypoints(prob, cfg.adaptation.max_points, cfg.adaptation.label_nms_radius)
        write_label(out / "labels" / f"{pair.id}.json", LabelRecord(pair.id, pair.dims, kps))
        total += len(kps)
        files += 1
    summary = {"pairs": files, "total_keypoints": total, "mean_keypoints": total / files if files else 0.0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "label", args, cfg)
    print(f"labelled {files} pairs, {summary['mean_keypoints']:.1f} keypoints/pair")


def _load_labels(label_dir, ids, dims):
    out = []
    for pid in ids:
        path = Path(label_dir) / f"{pid}.json"
        if not path.is_file():
            raise BadLabelFile(f"missing label file {path}")
        rec = read_label(path)
        if tuple(rec.dims) != tuple(dims[pid]):
            raise BadLabelFile(f"{path}: dims {rec.dims} do not match image {dims[pid]}")
        out.append(rec.keypoints)
    return out


def cmd_train(args, cfg):
    pairs = list(load_dataset(args.dataset))
    if not pairs:
        raise BadLabelFile(f"no pairs under {args.dataset}")
    label_dir = args.labels or Path(args.dataset) / "labels"
    labels = _load_labels(label_dir, [p.id for p in pairs], {p.id: p.dims for p in pairs})
    write_manifest(args.out, "train", args, cfg,
                   {"batch_size": cfg.train.batch_size, "lr": cfg.train.lr, "optimizer": "adam"})
    every = max(1, cfg.train.steps // 10)

    def report(rec):
        if rec["step"] % every == 0 or rec["step"] == 1:
            print(f"step {rec['step']:5d}  L {rec['L']:.4f}  L_p {rec['L_p']:.4f}  L_d {rec['L_d']:.4f}"
                  f"  L_h {rec['L_h']:.2f}", flush=True)

    train(pairs, labels, cfg, args.out, on_step=report)
    print(f"checkpoint: {Path(args.out) / 'checkpoint.pt'}")


def _model(args, cfg):
    if getattr(args, "untrained", False):
        torch.manual_seed(cfg.seed)
        return MatchNet(cfg.model).eval()
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required (or --untrained for eval)")
    model, _ = load_checkpoint(args.checkpoint)
    return model


def cmd_eval(args, cfg):
    model = _model(args, cfg)
    if args.identity:
        cfg.eval.warp_cfg = geo.zero_ranges()
    pairs = list(load_dataset(args.dataset))
    warps = make_eval_warps(pairs, cfg.eval, self_pairs=args.self_pairs)
    report = run_protocol(NetworkPipeline(model, cfg.match), warps, cfg.eval, cfg.fit)
    report.write(args.out)
    write_manifest(args.out, "eval", args, cfg)
    print(report.table())


def _draw_matches(img_a, img_b, kpa, kpb, matches, path):
    """Side-by-side view; lines coloured green (close descriptors) to red (far)."""
    to8 = lambda im: cv2.cvtColor(np.rint(np.clip(im, 0, 1) * 255).astype(np.uint8), cv2.COLOR_GRAY2BGR)
    a, b = to8(img_a), to8(img_b)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), np.uint8)
    canvas[:a.shape[0], :a.shape[1]] = a
    canvas[:b.shape[0], a.shape[1]:] = b
    d = matches.distances
    t = (d - d.min()) / (np.ptp(d) + 1e-12) if len(d) else d
    for (i, j), v in zip(matches.pairs, t):
        colour = (0, int(255 * (1 - v)), int(255 * v))
        p = (int(kpa[i, 1]), int(kpa[i, 0]))
        q = (int(kpb[j, 1]) + a.shape[1], int(kpb[j, 0]))
        cv2.line(canvas, p, q, colour, 1, cv2.LINE_AA)
        cv2.circle(canvas, p, 2, colour, -1)
        cv2.circle(canvas, q, 2, colour, -1)
    cv2.imwrite(str(path), canvas)


def _match_images(args, cfg):
    model = _model(args, cfg)
    img_a, img_b = read_gray(args.image_a), read_gray(args.image_b)
    pipe = NetworkPipeline(model, cfg.match)
    kpa, da = pipe.detect_and_describe(img_a)
    kpb, db = pipe.detect_and_describe(img_b)
    return img_a, img_b, kpa, kpb, mutual_nn_match(da, db)


def _matches_json(kpa, kpb, ms):
    return {"n_keypoints_a": len(kpa), "n_keypoints_b": len(kpb), "n_matches": len(ms),
            "matches": [{"a": [float(kpa[i, 0]), float(kpa[i, 1])], "b": [float(kpb[j, 0]), float(kpb[j, 1])],
                         "distance": float(d)} for (i, j), d in zip(ms.pairs, ms.distances)]}


def cmd_match(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img_a, img_b, kpa, kpb, ms = _match_images(args, cfg)
    (out / "matches.json").write_text(json.dumps(_matches_json(kpa, kpb, ms), indent=2) + "\n")
    _draw_matches(img_a, img_b, kpa, kpb, ms, out / "matches.png")
    write_manifest(out, "match", args, cfg)
    print(f"{len(kpa)} / {len(kpb)} keypoints, {len(ms)} mutual matches")


def cmd_register(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "register", args, cfg)
    img_a, img_b, kpa, kpb, ms = _match_images(args, cfg)
    _draw_matches(img_a, img_b, kpa, kpb, ms, out / "matches.png")
    diag = _matches_json(kpa, kpb, ms)
    try:
        H, mask = robust_homography(kpa, kpb, ms, cfg.fit, np.random.default_rng(cfg.seed))
    except (InsufficientMatches, NoConsensus):
        (out / "matches.json").write_text(json.dumps(diag, indent=2) + "\n")
        raise
    diag["inliers"] = [bool(v) for v in mask]
    (out / "matches.json").write_text(json.dumps(diag, indent=2) + "\n")
    result = {"homography": geo.to_list(H), "n_matches": len(ms), "n_inliers": int(mask.sum()),
              "maps": "image_a pixel (x, y) -> image_b pixel (x, y)"}
    (out / "homography.json").write_text(json.dumps(result, indent=2) + "\n")
    # bring B into A's frame: output pixel p samples B at H p
    b_in_a = geo.warp_image(img_b, geo.inverse(H)) if img_a.shape == img_b.shape else None
    if b_in_a is None:
        b_in_a = cv2.warpPerspective(img_b.astype(np.float32), np.linalg.inv(H), img_a.shape[::-1]).astype(float)
    overlay = np.stack([b_in_a, img_a, img_a], axis=-1)  # BGR: A in cyan, B in red
    cv2.imwrite(str(out / "overlay.png"), np.rint(np.clip(overlay, 0, 1) * 255).astype(np.uint8))
    print(f"{len(ms)} matches, {int(mask.sum())} inliers")
    print(json.dumps(result["homography"]))


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="msmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--workers", type=int, help="worker threads (default: available cores)")

    def inference(sp):
        sp.add_argument("--checkpoint")
        sp.add_argument("--det-threshold", type=float)
        sp.add_argument("--nms-radius", type=int)
        sp.add_argument("--reproj-threshold", type=float)

    sp = sub.add_parser("synth", help="write a synthetic aligned-pair dataset")
    common(sp)
    sp.add_argument("--n-pairs", type=int, default=16)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--style", default="thermal")
    sp.add_argument("--start", type=int, default=0, help="index of the first pair id")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("label", help="pseudo-label a dataset by multispectral adaptation")
    common(sp)
    sp.add_argument("dataset")
    sp.set_defaults(func=cmd_label)

    sp = sub.add_parser("train", help="train the network on a labelled dataset")
    common(sp)
    sp.add_argument("dataset")
    sp.add_argument("--labels", help="label directory (default: <dataset>/labels)")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="warped-pair evaluation of a checkpoint")
    common(sp)
    inference(sp)
    sp.add_argument("dataset")
    sp.add_argument("--untrained", action="store_true", help="evaluate freshly initialized weights")
    sp.add_argument("--identity", action="store_true", help="use identity warps")
    sp.add_argument("--self-pairs", action="store_true", help="match spectrum A against itself")
    sp.set_defaults(func=cmd_eval)

    for name, fn, text in (("match", cmd_match, "match two images"),
                           ("register", cmd_register, "estimate the homography between two images")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        inference(sp)
        sp.add_argument("image_a")
        sp.add_argument("image_b")
        sp.set_defaults(func=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is None and args.command == "label":
        args.workers = os.cpu_count() or 1
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InsufficientMatches, NoConsensus) as e:
        print(f"no consensus: {e}", file=sys.stderr)
        return EXIT_CONSENSUS
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
