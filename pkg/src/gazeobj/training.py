"""Joint training loop, batching, augmentation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig, RunConfig
from .data import Sample, crop_head
from .detection import Targets, build_targets, detection_loss
from .geometry import BoundingBox
from .losses import batch_energy_loss, gaussian_gt_heatmap, gaze_mse_loss, total_loss
from .model import GazeObjectNet, image_to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SAMPLE_CACHE_LIMIT = 256


class TrainingDiverged(FloatingPointError):
    pass


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


@dataclass
class Batch:
    scene: torch.Tensor
    head: torch.Tensor
    mask: torch.Tensor
    target_heatmap: torch.Tensor
    gt_boxes: list
    gaze_boxes: list
    targets: Targets

    @classmethod
    def concat(cls, parts: Sequence["Batch"]) -> "Batch":
        return cls(
            torch.cat([p.scene for p in parts]), torch.cat([p.head for p in parts]),
            torch.cat([p.mask for p in parts]), torch.cat([p.target_heatmap for p in parts]),
            [b for p in parts for b in p.gt_boxes], [b for p in parts for b in p.gaze_boxes],
            Targets(*(torch.cat([getattr(p.targets, f) for p in parts])
                      for f in ("obj", "obj_mask", "positive", "box", "cls"))),
        )


def make_batch(samples: Sequence[Sample], mcfg: ModelConfig, sigma: float) -> Batch:
    hm = mcfg.heatmap_size
    return Batch(
        torch.stack([image_to_tensor(s.image) for s in samples]),
        torch.stack([image_to_tensor(s.head_image) for s in samples]),
        torch.stack([torch.from_numpy(s.head_mask())[None] for s in samples]),
        torch.stack([torch.from_numpy(gaussian_gt_heatmap(s.gaze_point, hm, sigma, sigma))
                     for s in samples]).float(),
        [list(s.boxes) for s in samples],
        [s.gaze_box for s in samples],
        build_targets([list(s.boxes) for s in samples], mcfg.anchors, mcfg.det_grid,
                      mcfg.image_size),
    )


def augment_sample(s: Sample, rng: np.random.Generator, max_crop: float = 0.08) -> Sample:
    """Random crop (rescaled back to full size) and brightness/contrast jitter.

    The crop window always contains every box and the head, so no annotation
    is lost.
    """
    from PIL import Image

    size = s.image.shape[1], s.image.shape[0]
    xs = [b.x1 for b in s.boxes] + [b.x2 for b in s.boxes] + [s.head_box[0], s.head_box[2]]
    ys = [b.y1 for b in s.boxes] + [b.y2 for b in s.boxes] + [s.head_box[1], s.head_box[3]]
    left = rng.uniform(0, min(max_crop * size[0], min(xs)))
    top = rng.uniform(0, min(max_crop * size[1], min(ys)))
    right = size[0] - rng.uniform(0, min(max_crop * size[0], size[0] - max(xs)))
    bottom = size[1] - rng.uniform(0, min(max_crop * size[1], size[1] - max(ys)))
    sx, sy = size[0] / (right - left), size[1] / (bottom - top)

    def tx(x):
        return (x - left) * sx

    def ty(y):
        return (y - top) * sy

    img = Image.fromarray(s.image).transform(size, Image.EXTENT, (left, top, right, bottom),
                                             Image.BILINEAR)
    image = np.asarray(img, dtype=np.float32)
    gain = rng.uniform(0.8, 1.2)
    bias = rng.uniform(-20, 20)
    image = np.clip((image - 128) * gain + 128 + bias, 0, 255).astype(np.uint8)
    boxes = [BoundingBox(tx(b.x1), ty(b.y1), tx(b.x2), ty(b.y2), b.category_id) for b in s.boxes]
    head_box = (tx(s.head_box[0]), ty(s.head_box[1]), tx(s.head_box[2]), ty(s.head_box[3]))
    gx, gy = s.gaze_point
    gaze = (tx(gx * size[0]) / size[0], ty(gy * size[1]) / size[1])
    return replace(s, image=image, head_image=crop_head(image, head_box), head_box=head_box,
                   gaze_point=gaze, boxes=boxes)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def compute_losses(model: GazeObjectNet, batch: Batch, cfg: RunConfig):
    mcfg = model.cfg
    out = model(batch.scene, batch.head, batch.mask)
    l_det, det_parts = detection_loss(out["det"], batch.targets, mcfg.anchors, mcfg.image_size)
    l_gaze = gaze_mse_loss(out["heatmap"], batch.target_heatmap)
    image_wh = (mcfg.image_size, mcfg.image_size)
    l_eng = batch_energy_loss(out["heatmap"], batch.gaze_boxes, image_wh)
    parts = {"l_det": l_det, "l_gaze": l_gaze, "l_eng": l_eng}
    for name, v in parts.items():
        if not torch.isfinite(v):
            raise TrainingDiverged(f"non-finite loss component {name} = {v.item()}")
    total = total_loss(l_det, l_gaze, l_eng, cfg.weights)
    return total, parts, det_parts


class Trainer:
    """Single-device trainer.

    The sample order of epoch ``e`` and the augmentation of step ``k`` are
    derived from ``(seed, e)`` and ``(seed, k)``, so a resumed run replays the
    uninterrupted one exactly.
    """

    def __init__(self, cfg: RunConfig, samples: Sequence[Sample],
                 log_fn: Optional[Callable[[dict], None]] = None):
        if len(samples) == 0:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.samples = list(samples)
        set_seed(cfg.seed)
        self.model = GazeObjectNet(cfg.model)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.step = 0
        self.history: list[dict] = []
        self.log_fn = log_fn
        self._sample_cache: dict = {}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    def _batch_for_step(self, step: int) -> Batch:
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = epoch_order(self.cfg.seed, epoch, len(self.samples))
        idx = order[pos * self.cfg.batch_size:(pos + 1) * self.cfg.batch_size]
        if self.cfg.augment:
            rng = np.random.default_rng([self.cfg.seed, step, 11])
            chosen = [augment_sample(self.samples[i], rng) for i in idx]
            return make_batch(chosen, self.cfg.model, self.cfg.sigma)
        parts = []
        for i in idx:
            part = self._sample_cache.get(i)
            if part is None:
                part = make_batch([self.samples[i]], self.cfg.model, self.cfg.sigma)
                if len(self._sample_cache) < SAMPLE_CACHE_LIMIT:
                    self._sample_cache[i] = part
            parts.append(part)
        return Batch.concat(parts)

    def train_step(self) -> dict:
        self.model.train()
        batch = self._batch_for_step(self.step)
        total, parts, det_parts = compute_losses(self.model, batch, self.cfg)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.step += 1
        rec = {"step": self.step, **{k: v.item() for k, v in parts.items()},
               "total": total.item()}
        rec.update({f"det_{k}": v.item() for k, v in det_parts.items()})
        self.history.append(rec)
        return rec

    def fit(self, checkpoint_dir=None) -> "Trainer":
        while self.step < self.total_steps:
            rec = self.train_step()
            if self.log_fn and (self.step % self.cfg.log_every == 0 or self.step == 1):
                self.log_fn(rec)
            if checkpoint_dir and self.step % self.cfg.checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / "last.pt")
        if checkpoint_dir:
            self.save(Path(checkpoint_dir) / "last.pt")
        return self

    def state(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "params": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "history": self.history,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state(), tmp)
        os.replace(tmp, path)
        return path

    @classmethod
    def resume(cls, path, samples, log_fn=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(RunConfig.from_dict(ckpt["config"]), samples, log_fn)
        trainer.model.load_state_dict(ckpt["params"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.step = ckpt["step"]
        trainer.history = list(ckpt["history"])
        return trainer


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    return ckpt


def model_from_checkpoint(path_or_ckpt) -> tuple[GazeObjectNet, RunConfig]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, dict) else load_checkpoint(path_or_ckpt)
    cfg = RunConfig.from_dict(ckpt["config"])
    model = GazeObjectNet(cfg.model)
    model.load_state_dict(ckpt["params"])
    model.eval()
    return model, cfg


def smoothed(history: list[dict], key: str = "total", at: Optional[int] = None,
             window: int = 25) -> float:
    """Mean of ``key`` over the ``window`` steps ending at step ``at``."""
    if at is None:
        at = history[-1]["step"]
    vals = [h[key] for h in history if at - window < h["step"] <= at]
    if not vals:
        raise ValueError(f"no history around step {at}")
    return float(np.mean(vals))


def jsonl_logger(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def log_fn(rec: dict):
        line = json.dumps({k: rec[k] for k in ("step", "l_det", "l_gaze", "l_eng", "total")})
        with open(path, "a") as fh:
            fh.write(line + "\n")
        print(line, flush=True)

    return log_fn
