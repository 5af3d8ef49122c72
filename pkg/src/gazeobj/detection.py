"""Single-scale anchor-based detection over defocused features.

Raw grid layout is ``(B, A * (5 + C), G, G)``; per anchor the channels are
``tx, ty, tw, th, objectness, class_0 .. class_{C-1}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .geometry import BoundingBox
from .sgs import ConvNormAct, DetUpsample

LOGIT_CLAMP = 12.0


class DetectionBranch(nn.Module):
    """Top-down fusion of the defocused C5, C4, C3 levels into one grid.

    Upsampling between levels uses the same operator as the extractor
    (Defocus, or 1x1 compression plus bilinear interpolation).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        r2 = cfg.ratio ** 2
        p3, p4, p5 = (w // r2 for w in cfg.widths[1:])
        n, d = cfg.neck_channels, cfg.det_channels
        self.num_anchors = len(cfg.anchors)
        self.num_classes = cfg.num_classes
        out = self.num_anchors * (5 + cfg.num_classes)
        self.reduce5 = ConvNormAct(p5, n, 1)
        self.up5 = DetUpsample(n, cfg.ratio, cfg.upsample)
        self.lateral4 = ConvNormAct(p4, n // r2, 1)
        self.fuse4 = ConvNormAct(2 * (n // r2), n, 3)
        self.up4 = DetUpsample(n, cfg.ratio, cfg.upsample)
        self.lateral3 = ConvNormAct(p3, n // r2, 1)
        self.fuse3 = nn.Sequential(ConvNormAct(2 * (n // r2), d, 3), ConvNormAct(d, d, 3))
        self.head = nn.Conv2d(d, out, 1)
        # extra coarse heads exist only for cost comparisons
        self.extra_heads = nn.ModuleList()
        if cfg.num_det_heads == 3:
            for c in (n, n):
                self.extra_heads.append(nn.Sequential(ConvNormAct(c, c, 3), nn.Conv2d(c, out, 1)))
        self._init_bias()

    def _init_bias(self):
        with torch.no_grad():
            b = self.head.bias.view(self.num_anchors, -1)
            b[:, 4] = -math.log(99.0)
            b[:, 5:] = -math.log(self.num_classes - 1.0) if self.num_classes > 1 else 0.0

    def forward(self, f_det):
        p3, p4, p5 = f_det
        x5 = self.reduce5(p5)
        x4 = self.fuse4(torch.cat([self.up5(x5), self.lateral4(p4)], dim=1))
        x3 = self.fuse3(torch.cat([self.up4(x4), self.lateral3(p3)], dim=1))
        grid = self.head(x3)
        if self.extra_heads:
            # computed and discarded: the loss and decoder use the fine grid only
            for head, x in zip(self.extra_heads, (x5, x4)):
                head(x)
        return grid


def split_grid(raw: torch.Tensor, num_anchors: int) -> torch.Tensor:
    """``(B, A*(5+C), G, G)`` -> ``(B, A, G, G, 5+C)``."""
    b, ch, gh, gw = raw.shape
    if ch % num_anchors:
        raise ValueError(f"{ch} channels do not split into {num_anchors} anchors")
    return raw.view(b, num_anchors, ch // num_anchors, gh, gw).permute(0, 1, 3, 4, 2)


def decode_xywh(t: torch.Tensor, anchors, stride: float) -> torch.Tensor:
    """Offsets ``(..., A, G, G, >=4)`` to ``(cx, cy, w, h)`` in pixels."""
    a = torch.as_tensor(anchors, dtype=t.dtype, device=t.device)
    gh, gw = t.shape[-3], t.shape[-2]
    jj = torch.arange(gw, dtype=t.dtype, device=t.device).view(1, 1, gw)
    ii = torch.arange(gh, dtype=t.dtype, device=t.device).view(1, gh, 1)
    cx = (jj + torch.sigmoid(t[..., 0])) * stride
    cy = (ii + torch.sigmoid(t[..., 1])) * stride
    w = a[:, 0].view(-1, 1, 1) * torch.exp(t[..., 2].clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    h = a[:, 1].view(-1, 1, 1) * torch.exp(t[..., 3].clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    return torch.stack([cx, cy, w, h], dim=-1)


def xywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    half = b[..., 2:] / 2
    return torch.cat([b[..., :2] - half, b[..., :2] + half], dim=-1)


def encode_box(box: BoundingBox, anchor, stride: float, eps: float = 1e-9):
    """Cell index and target offsets that :func:`decode_xywh` maps back to ``box``.

    Returns ``((i, j), (tx, ty, tw, th))``.
    """
    cx, cy = box.center
    j, i = int(cx // stride), int(cy // stride)
    fx = min(max(cx / stride - j, eps), 1 - eps)
    fy = min(max(cy / stride - i, eps), 1 - eps)
    t = (math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
         math.log(box.width / anchor[0]), math.log(box.height / anchor[1]))
    return (i, j), t


@dataclass
class Detections:
    boxes: np.ndarray     # (N, 4) xyxy
    scores: np.ndarray    # (N,)
    classes: np.ndarray   # (N,)

    def to_boxes(self) -> list[BoundingBox]:
        return [BoundingBox(*map(float, b), int(c), float(s))
                for b, s, c in zip(self.boxes, self.scores, self.classes)]


def decode_grid(raw: torch.Tensor, anchors, image_size: int, conf_threshold: float = 0.0,
                max_candidates: int = 1000) -> list[Detections]:
    """Decode a raw grid batch into per-image candidate detections.

    Score is ``sigmoid(objectness) * max_c sigmoid(class_c)``; boxes are
    clipped to the image.
    """
    if not torch.isfinite(raw).all():
        raise ValueError("detection grid contains non-finite logits")
    raw = raw.detach().double()
    t = split_grid(raw, len(anchors))
    stride = image_size / t.shape[-2]
    xyxy = xywh_to_xyxy(decode_xywh(t, anchors, stride)).clamp(0, image_size)
    cls_prob, cls = torch.sigmoid(t[..., 5:]).max(dim=-1)
    score = torch.sigmoid(t[..., 4]) * cls_prob
    out = []
    for b in range(raw.shape[0]):
        s = score[b].reshape(-1)
        keep = torch.nonzero(s >= conf_threshold).flatten()
        keep = keep[torch.argsort(-s[keep], stable=True)][:max_candidates]
        boxes = xyxy[b].reshape(-1, 4)[keep]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        keep = keep[valid]
        out.append(Detections(xyxy[b].reshape(-1, 4)[keep].numpy(), s[keep].numpy(),
                              cls[b].reshape(-1)[keep].numpy()))
    return out


def decode_boxes(raw: torch.Tensor, anchors, image_size: int,
                 conf_threshold: float = 0.0) -> list[list[BoundingBox]]:
    return [d.to_boxes() for d in decode_grid(raw, anchors, image_size, conf_threshold)]


# -- loss ------------------------------------------------------------------

def ciou_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Complete-IoU loss between ``(..., 4)`` boxes in ``(cx, cy, w, h)`` form.

    ``1 - IoU + rho^2 / d^2 + alpha * v``; ``alpha`` carries no gradient.
    """
    p1, p2 = pred[..., :2] - pred[..., 2:] / 2, pred[..., :2] + pred[..., 2:] / 2
    g1, g2 = gt[..., :2] - gt[..., 2:] / 2, gt[..., :2] + gt[..., 2:] / 2
    inter_wh = (torch.minimum(p2, g2) - torch.maximum(p1, g1)).clamp(min=0)
    inter = inter_wh[..., 0] * inter_wh[..., 1]
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    iou = inter / (union + eps)
    enclose = torch.maximum(p2, g2) - torch.minimum(p1, g1)
    d2 = (enclose ** 2).sum(-1) + eps
    rho2 = ((pred[..., :2] - gt[..., :2]) ** 2).sum(-1)
    v = (4 / math.pi ** 2) * (torch.atan(gt[..., 2] / gt[..., 3])
                              - torch.atan(pred[..., 2] / pred[..., 3])) ** 2
    with torch.no_grad():
        alpha = v / ((1 - iou) + v + eps)
    return 1 - iou + rho2 / d2 + alpha * v


def _anchor_prior_boxes(anchors, grid: int, stride: float) -> np.ndarray:
    """``(A, G, G, 4)`` xyxy anchor priors centred on every cell."""
    c = (np.arange(grid) + 0.5) * stride
    cx, cy = np.meshgrid(c, c)
    out = []
    for w, h in anchors:
        out.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1))
    return np.stack(out)


def _shape_iou(w1, h1, w2, h2) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


@dataclass
class Targets:
    """Dense per-anchor targets for one batch."""

    obj: torch.Tensor        # (B, A, G, G) 0/1
    obj_mask: torch.Tensor   # (B, A, G, G) bool, False where ignored
    positive: torch.Tensor   # (B, A, G, G) bool
    box: torch.Tensor        # (B, A, G, G, 4) cx, cy, w, h of assigned GT
    cls: torch.Tensor        # (B, A, G, G) long category of assigned GT


def build_targets(gt_boxes: list[list[BoundingBox]], anchors, grid: int, image_size: int,
                  ignore_iou: float = 0.5) -> Targets:
    """Assign each GT to the best-shape anchor at the cell holding its center.

    Unassigned anchor priors overlapping any GT by more than ``ignore_iou``
    are excluded from the objectness loss.
    """
    from .geometry import iou_matrix

    stride = image_size / grid
    n_a = len(anchors)
    shape = (len(gt_boxes), n_a, grid, grid)
    obj = torch.zeros(shape)
    obj_mask = torch.ones(shape, dtype=torch.bool)
    positive = torch.zeros(shape, dtype=torch.bool)
    box = torch.ones(shape + (4,))
    cls = torch.zeros(shape, dtype=torch.long)
    priors = _anchor_prior_boxes(anchors, grid, stride).reshape(-1, 4)
    for b, gts in enumerate(gt_boxes):
        if not gts:
            continue
        overlap = iou_matrix(priors, [g.as_tuple() for g in gts]).max(axis=1)
        obj_mask[b] = torch.from_numpy(overlap <= ignore_iou).view(n_a, grid, grid)
        for g in gts:
            cx, cy = g.center
            j = min(int(cx // stride), grid - 1)
            i = min(int(cy // stride), grid - 1)
            a = max(range(n_a), key=lambda k: (_shape_iou(g.width, g.height, *anchors[k]), -k))
            positive[b, a, i, j] = True
            obj[b, a, i, j] = 1.0
            obj_mask[b, a, i, j] = True
            box[b, a, i, j] = torch.tensor([cx, cy, g.width, g.height])
            cls[b, a, i, j] = g.category_id
    return Targets(obj, obj_mask, positive, box, cls)


def detection_loss(raw: torch.Tensor, targets: Targets, anchors, image_size: int):
    """Objectness BCE over non-ignored anchors plus class BCE and CIoU on positives.

    Returns ``(total, {"cls", "obj", "reg"})``; class and regression terms are
    zero when the batch has no positive anchor.
    """
    t = split_grid(raw, len(anchors))
    stride = image_size / t.shape[-2]
    l_obj = F.binary_cross_entropy_with_logits(t[..., 4][targets.obj_mask],
                                               targets.obj[targets.obj_mask].to(t.dtype))
    pos = targets.positive
    if pos.any():
        tp = t[pos]
        n_cls = tp.shape[-1] - 5
        onehot = F.one_hot(targets.cls[pos], n_cls).to(tp.dtype)
        # mean over classes, then over positives
        l_cls = F.binary_cross_entropy_with_logits(tp[:, 5:], onehot)
        pred_xywh = decode_xywh(t, anchors, stride)[pos]
        l_reg = ciou_loss(pred_xywh, targets.box[pos].to(tp.dtype)).mean()
    else:
        l_cls = l_reg = raw.sum() * 0.0
    total = l_cls + l_obj + l_reg
    return total, {"cls": l_cls, "obj": l_obj, "reg": l_reg}
