"""Dual-head ArcFace training on rendered synthetic impressions."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .evaluation import EvaluationError, ScoreSet, tar_at_far
from .model import AFRNet, ModelConfig, preprocess
from .storage import save_checkpoint
from .synthdata import Sample, TrainConfig, make_dataset, poly_lr, render_sample

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "lr", "loss_cnn_head", "loss_attn_head", "val_tar"]
VAL_FAR = 0.01


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    step: int
    lr: float
    loss_cnn_head: float
    loss_attn_head: float
    val_tar: float
    val_gap: float  # genuine mean - imposter mean cosine

    def row(self):
        return [self.epoch, self.step, f"{self.lr:.8g}", f"{self.loss_cnn_head:.6f}",
                f"{self.loss_attn_head:.6f}", f"{self.val_tar:.6f}"]


def split(samples: Sequence[Sample], n_impressions: int):
    """Last impression of every identity is held out for validation."""
    train = [s for s in samples if s.impression < n_impressions - 1]
    val = [s for s in samples if s.impression == n_impressions - 1]
    return train, val


@torch.no_grad()
def embed(model: AFRNet, images: Sequence[np.ndarray], batch: int = 32):
    model.eval()
    zc, za = [], []
    for i in range(0, len(images), batch):
        x = torch.stack([preprocess(im, model.cfg.input_size) for im in images[i:i + batch]])
        out = model(x)
        zc.append(out.z_c.double().numpy())
        za.append(out.z_a.double().numpy())
    return np.concatenate(zc), np.concatenate(za)


def heldout_scores(model: AFRNet, ref_imgs, probe_imgs, w1: float = 0.2) -> ScoreSet:
    """Probe i vs reference j for all i, j; diagonal pairs are genuine."""
    rc, ra = embed(model, ref_imgs)
    pc, pa = embed(model, probe_imgs)
    sim = w1 * (pc @ rc.T) + (1 - w1) * (pa @ ra.T)
    eye = np.eye(len(sim), dtype=bool)
    return ScoreSet(sim[eye], sim[~eye])


def _seed_all(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def train(cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None, out_dir=None,
          data_seed: Optional[int] = None, images: Optional[dict] = None,
          progress: Optional[Callable[[EpochLog], None]] = None):
    """Train and keep the best epoch by held-out TAR@FAR=1%.

    Writes ``model.afrn`` (best), ``last.pt`` (resume state) and
    ``metrics.csv`` into ``out_dir`` when given.  Re-running with the same
    ``out_dir`` resumes after the last completed epoch.  Returns
    ``(best_model, logs)``.
    """
    data_seed = cfg.seed if data_seed is None else data_seed
    model_cfg = (model_cfg or ModelConfig.tiny()).with_classes(cfg.identities)
    samples = make_dataset(cfg.identities, cfg.impressions_per_id, data_seed)
    if images is None:
        images = {(s.identity, s.impression): render_sample(s, data_seed) for s in samples}
    train_s, val_s = split(samples, cfg.impressions_per_id)
    sz = model_cfg.input_size
    for im in images.values():
        if im.shape != (sz, sz):
            raise ValueError(f"image size {im.shape} does not match model input {sz}")
    x_train = torch.stack([preprocess(images[s.identity, s.impression], sz) for s in train_s])
    y_train = torch.tensor([s.identity for s in train_s])
    ref_imgs = [images[i, 0] for i in range(cfg.identities)]
    val_imgs = [images[s.identity, s.impression] for s in val_s]

    _seed_all(cfg.seed)
    model = AFRNet(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_s) / cfg.batch)
    total = steps_per_epoch * cfg.epochs
    logs: list[EpochLog] = []
    best_key, best_state = None, None
    start_epoch = 0

    out = Path(out_dir) if out_dir is not None else None
    resume = out / "last.pt" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume.exists():
            st = torch.load(resume, weights_only=False)
            if st["train_cfg"] == asdict(cfg) and st["model_cfg"] == model_cfg.to_json():
                model.load_state_dict(st["model"])
                opt.load_state_dict(st["opt"])
                torch.set_rng_state(st["torch_rng"])
                logs = [EpochLog(**e) for e in st["logs"]]
                best_key, best_state = st["best_key"], st["best_state"]
                start_epoch = st["epoch"] + 1
                log.info("resuming after epoch %d", st["epoch"])

    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_s))
        lc_sum = la_sum = 0.0
        lr = cfg.lr0
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * cfg.batch:(b + 1) * cfg.batch])
            lr = poly_lr(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            loss, lc, la = model.loss(x_train[idx], y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lc_sum += lc.item() * len(idx)
            la_sum += la.item() * len(idx)
            step += 1
        try:
            scores = heldout_scores(model, ref_imgs, val_imgs)
        except EvaluationError:
            raise TrainingDiverged(f"non-finite validation embeddings after epoch {epoch}") from None
        tar = tar_at_far(scores, VAL_FAR).tar
        gap = float(scores.genuine.mean() - scores.imposter.mean())
        e = EpochLog(epoch, step, lr, lc_sum / len(train_s), la_sum / len(train_s), tar, gap)
        logs.append(e)
        log.info("epoch %d loss_c %.4f loss_a %.4f val_tar %.4f gap %.4f", epoch,
                 e.loss_cnn_head, e.loss_attn_head, tar, gap)
        key = (tar, gap)
        if best_key is None or key > tuple(best_key):
            best_key = key
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if out is not None:
            torch.save({"epoch": epoch, "model": model.state_dict(), "opt": opt.state_dict(),
                        "torch_rng": torch.get_rng_state(), "logs": [asdict(l) for l in logs],
                        "best_key": best_key, "best_state": best_state,
                        "train_cfg": asdict(cfg), "model_cfg": model_cfg.to_json()}, f"{resume}.tmp")
            os.replace(f"{resume}.tmp", resume)
            _write_metrics(out / "metrics.csv", logs)
            best = AFRNet(model_cfg)
            best.load_state_dict(best_state)
            save_checkpoint(best, out / "model.afrn")
        if progress:  # after saving, so an interrupt here loses nothing
            progress(e)

    best = AFRNet(model_cfg)
    best.load_state_dict(best_state if best_state is not None else model.state_dict())
    return best.eval(), logs


def _write_metrics(path: Path, logs: Sequence[EpochLog]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for e in logs:
            w.writerow(e.row())
