"""Inference, evaluation and visualization on top of a trained network."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from ._validation import check_head_box, check_image
from .data import Sample, crop_head
from .detection import decode_grid
from .geometry import BoundingBox, GazeVector, select_gaze_index, wuoc
from .losses import gaussian_gt_heatmap, gaze_point_mask, sigma_disk_mask
from .metrics import (ImageRecord, MetricReport, angular_error, ap_summary, gaze_auc,
                      heatmap_argmax_point, l2_distance, nms)
from .model import GazeObjectNet, image_to_tensor


@dataclass
class Prediction:
    boxes: list            # list[BoundingBox], post-NMS, highest score first
    heatmap: np.ndarray    # (Hm, Wm)
    gaze_index: Optional[int]

    @property
    def gaze_object(self) -> Optional[BoundingBox]:
        return None if self.gaze_index is None else self.boxes[self.gaze_index]

    @property
    def gaze_point(self) -> tuple[float, float]:
        return heatmap_argmax_point(self.heatmap)

    def to_record(self, image_id: str) -> ImageRecord:
        return ImageRecord(image_id, list(self.boxes), self.gaze_point, self.gaze_index)


def _select(heatmap, boxes, image_size) -> Optional[int]:
    return select_gaze_index(heatmap, boxes, image_size) if boxes else None


@torch.no_grad()
def predict_batch(model: GazeObjectNet, images, head_images, head_masks, *,
                  conf_threshold=0.05, nms_threshold=0.3, top_k=100) -> list[Prediction]:
    """Detections after NMS, heatmap, and the max-mean-energy gaze object."""
    model.eval()
    scene = torch.stack([image_to_tensor(im) for im in images])
    head = torch.stack([image_to_tensor(im) for im in head_images])
    mask = torch.stack([torch.as_tensor(m, dtype=torch.float32)[None] for m in head_masks])
    out = model(scene, head, mask)
    size = model.cfg.image_size
    dets = decode_grid(out["det"], model.cfg.anchors, size, conf_threshold)
    heatmaps = out["heatmap"].double().numpy()
    preds = []
    for d, hm in zip(dets, heatmaps):
        boxes = nms(d.to_boxes(), nms_threshold, top_k)
        preds.append(Prediction(boxes, hm, _select(hm, boxes, (size, size))))
    return preds


def predict_samples(model, samples: Sequence[Sample], batch_size: int = 8, **kw) -> list[Prediction]:
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        preds += predict_batch(model, [s.image for s in chunk], [s.head_image for s in chunk],
                               [s.head_mask() for s in chunk], **kw)
    return preds


def oracle_predictions(samples: Sequence[Sample], heatmap_size: int = 64,
                       sigma: float = 3.0) -> list[Prediction]:
    """Ground-truth boxes (score 1) and ground-truth heatmaps."""
    out = []
    for s in samples:
        boxes = [BoundingBox(*b.as_tuple(), b.category_id, 1.0) for b in s.boxes]
        hm = gaussian_gt_heatmap(s.gaze_point, heatmap_size, sigma, sigma)
        out.append(Prediction(boxes, hm, _select(hm, boxes, s.image_size)))
    return out


def evaluate_predictions(samples: Sequence[Sample], preds: Sequence[Prediction],
                         sigma: float = 3.0) -> MetricReport:
    """Gaze, detection and gaze-object metrics over paired samples/predictions.

    Besides the regular wUoC this reports the two bottleneck variants:
    detections selected with the ground-truth heatmap, and ground-truth boxes
    selected with the predicted heatmap. A sample without detections scores
    wUoC 0.
    """
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if len(samples) != len(preds):
        raise ValueError(f"{len(preds)} predictions for {len(samples)} samples")
    aucs, aucs_disk, dists, angs = [], [], [], []
    w_pred, w_gt_gaze, w_gt_boxes = [], [], []
    for s, p in zip(samples, preds):
        size = s.image_size
        hm_size = p.heatmap.shape[0]
        gt_hm = gaussian_gt_heatmap(s.gaze_point, hm_size, sigma, sigma)
        aucs.append(gaze_auc(p.heatmap, gaze_point_mask(s.gaze_point, hm_size)))
        aucs_disk.append(gaze_auc(p.heatmap, sigma_disk_mask(gt_hm)))
        pt = p.gaze_point
        dists.append(l2_distance(pt, s.gaze_point))
        hx1, hy1, hx2, hy2 = s.head_box
        eye = ((hx1 + hx2) / 2 / size[0], (hy1 + hy2) / 2 / size[1])
        try:
            angs.append(angular_error(GazeVector(eye, pt), GazeVector(eye, s.gaze_point)))
        except ValueError:
            angs.append(180.0)
        gt_box = s.gaze_box
        w_pred.append(wuoc(p.gaze_object, gt_box) if p.gaze_object is not None else 0.0)
        if p.boxes:
            w_gt_gaze.append(wuoc(p.boxes[select_gaze_index(gt_hm, p.boxes, size)], gt_box))
        else:
            w_gt_gaze.append(0.0)
        w_gt_boxes.append(wuoc(s.boxes[select_gaze_index(p.heatmap, s.boxes, size)], gt_box))
    ap = ap_summary([p.boxes for p in preds], [s.boxes for s in samples])
    return MetricReport(
        auc=float(np.mean(aucs)), l2_dist=float(np.mean(dists)),
        angular_err=float(np.mean(angs)), ap=ap["ap"], ap50=ap["ap50"], ap75=ap["ap75"],
        wuoc_mean=float(np.mean(w_pred)), sample_count=len(samples),
        wuoc_gt_gaze=float(np.mean(w_gt_gaze)), wuoc_gt_boxes=float(np.mean(w_gt_boxes)),
        auc_3sigma=float(np.mean(aucs_disk)))


def evaluate(model: GazeObjectNet, samples: Sequence[Sample], *, sigma: float = 3.0,
             **predict_kw) -> tuple[MetricReport, list[Prediction]]:
    samples = list(samples)
    preds = predict_samples(model, samples, **predict_kw)
    return evaluate_predictions(samples, preds, sigma), preds


def infer(model: GazeObjectNet, image: np.ndarray, head_box, **predict_kw) -> dict:
    """Run one image; returns ``{"boxes", "heatmap", "gaze_object"}``."""
    image = check_image(image)
    head_box = check_head_box(head_box, image.shape[1], image.shape[0])
    head_img = crop_head(image, head_box)
    dummy = Sample("infer", image, head_img, tuple(head_box), (0.5, 0.5), 0, [])
    pred = predict_batch(model, [image], [head_img], [dummy.head_mask()], **predict_kw)[0]
    return {"boxes": pred.boxes, "heatmap": pred.heatmap, "gaze_object": pred.gaze_object}


# -- rendering ---------------------------------------------------------------

def heatmap_to_uint8(m: np.ndarray) -> np.ndarray:
    """Linear min-max scaling to 0..255 (a constant map renders as zeros)."""
    m = np.asarray(m, dtype=float)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def save_heatmap_png(m: np.ndarray, path) -> None:
    Image.fromarray(heatmap_to_uint8(m), mode="L").save(path)


def _draw_boxes(img: Image.Image, boxes, color, width=1):
    d = ImageDraw.Draw(img)
    for b in boxes:
        d.rectangle(b.as_tuple(), outline=color, width=width)
    return img


def render_panels(sample: Sample, pred: Prediction, panel_size: int = 224) -> Image.Image:
    """Detections | heatmap overlay | predicted gaze box | ground-truth gaze box."""
    base = Image.fromarray(sample.image).convert("RGB")
    p_det = _draw_boxes(base.copy(), pred.boxes, (255, 255, 0))
    heat = Image.fromarray(heatmap_to_uint8(pred.heatmap), mode="L").resize(base.size, Image.BILINEAR)
    red = Image.merge("RGB", (heat, Image.new("L", base.size, 0), Image.new("L", base.size, 0)))
    p_heat = Image.blend(base, red, 0.6)
    p_pred = _draw_boxes(base.copy(), [pred.gaze_object] if pred.gaze_object else [], (0, 255, 0), 2)
    p_gt = _draw_boxes(base.copy(), [sample.gaze_box], (255, 0, 0), 2)
    panels = [p.resize((panel_size, panel_size)) for p in (p_det, p_heat, p_pred, p_gt)]
    canvas = Image.new("RGB", (4 * panel_size, panel_size))
    for k, p in enumerate(panels):
        canvas.paste(p, (k * panel_size, 0))
    return canvas


def visualize(model: GazeObjectNet, sample: Sample, out_path, panel_size: int = 224,
              **predict_kw) -> Path:
    pred = predict_samples(model, [sample], **predict_kw)[0]
    out_path = Path(out_path)
    try:
        render_panels(sample, pred, panel_size).save(out_path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write visualization to {out_path}: {exc}") from exc
    return out_path
