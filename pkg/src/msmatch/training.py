"""Joint training of the detector, descriptor and homography heads."""
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from . import losses as L
from .datahub import make_train_sample
from .errors import NanLoss
from .network import MatchNet, save_checkpoint

log = logging.getLogger(__name__)


def collate(samples, loss_cfg):
    """Stack TrainSamples into tensors plus per-sample correspondence masks."""
    src = torch.from_numpy(np.stack([s.src for s in samples]).astype(np.float32))[:, None]
    dst = torch.from_numpy(np.stack([s.dst for s in samples]).astype(np.float32))[:, None]
    lab1 = torch.from_numpy(np.stack([s.labels_src for s in samples]))
    lab2 = torch.from_numpy(np.stack([s.labels_dst for s in samples]))
    dims = samples[0].src.shape
    masks = torch.from_numpy(np.stack([L.correspondence_mask(s.H_gt, dims) for s in samples]).astype(np.float32))
    deltas = torch.from_numpy(np.stack([geo.four_point_from_matrix(s.H_gt, dims) for s in samples]).astype(np.float32))
    return {"src": src, "dst": dst, "labels_src": lab1, "labels_dst": lab2, "mask": masks, "deltas": deltas}


def loss_terms(model, batch, cfg):
    out1, out2, pred = model.forward_pair(batch["src"], batch["dst"])
    parts = {
        "det1": L.detector_loss(out1["logits"], batch["labels_src"], cfg.class_weights, cfg.weighted_mean),
        "det2": L.detector_loss(out2["logits"], batch["labels_dst"], cfg.class_weights, cfg.weighted_mean),
        "desc": L.descriptor_loss(out1["descriptors"], out2["descriptors"], batch["mask"], cfg),
        "homography": L.homography_loss(pred, batch["deltas"]),
    }
    return parts, L.total_loss(parts, cfg)


class BatchStream:
    """Deterministic stream of training batches.

    Pairs are visited in epochs of a seeded permutation; each sample draws
    its crop, spectra and warp from its own child generator so the stream
    depends only on the seed and the step.
    """

    def __init__(self, pairs, labels, sample_cfg, batch_size, seed):
        self.pairs, self.labels = pairs, labels
        self.cfg, self.batch_size = sample_cfg, batch_size
        self.seed = seed

    def indices(self, step):
        n = len(self.pairs)
        start = step * self.batch_size
        out = []
        for k in range(start, start + self.batch_size):
            epoch, pos = divmod(k, n)
            out.append(int(np.random.default_rng([self.seed, epoch]).permutation(n)[pos]))
        return out

    def batch(self, step):
        samples = []
        for slot, i in enumerate(self.indices(step)):
            rng = np.random.default_rng([self.seed, step, slot, 7])
            samples.append(make_train_sample(self.pairs[i], self.labels[i], self.cfg, rng))
        return samples


def train(pairs, labels, run_cfg, out_dir, steps=None, on_step=None):
    """Train from scratch; returns ``(model, history)``.

    Writes ``train_log.jsonl`` (one line per step) and ``checkpoint.pt``
    (overwritten every ``checkpoint_every`` steps and at the end).  A
    non-finite loss aborts with NanLoss, leaving the last good checkpoint.
    """
    tc = run_cfg.train
    steps = tc.steps if steps is None else steps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(run_cfg.seed)
    model = MatchNet(run_cfg.model)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = None
    if tc.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    stream = BatchStream(pairs, labels, tc.sample, tc.batch_size, run_cfg.seed)
    ckpt = out / "checkpoint.pt"
    history = []
    with open(out / "train_log.jsonl", "w") as fh:
        for step in range(1, steps + 1):
            batch = collate(stream.batch(step - 1), run_cfg.loss)
            try:
                parts, total = loss_terms(model, batch, run_cfg.loss)
            except NanLoss:
                log.error("non-finite loss at step %d; last good checkpoint kept at %s", step, ckpt)
                raise
            opt.zero_grad()
            total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            rec = {"step": step, "L_p": parts["det1"].item(), "L_p_prime": parts["det2"].item(),
                   "L_d": parts["desc"].item(), "L_h": parts["homography"].item(), "L": total.item()}
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            if step % tc.checkpoint_every == 0 or step == steps:
                save_checkpoint(ckpt, model, {"step": step, "seed": run_cfg.seed,
                                              "batch_size": tc.batch_size, "lr": tc.lr})
    model.eval()
    return model, history
