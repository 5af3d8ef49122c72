"""Detection and gaze metrics plus the per-image JSON-lines record format."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score

from .geometry import BoundingBox, GazeVector, iou_matrix

AP_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = 0.3,
        top_k: int = 100) -> list[BoundingBox]:
    """Greedy per-category non-maximum suppression.

    Boxes are visited by descending score (lower input index first on ties);
    a box is dropped when its IoU with an already kept box of the same
    category reaches ``iou_threshold``. At most ``top_k`` boxes are returned,
    highest score first.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if len(boxes) == 0:
        return []
    if any(b.score is None for b in boxes):
        raise ValueError("nms requires scored boxes")
    scores = np.array([b.score for b in boxes])
    order = np.lexsort((np.arange(len(boxes)), -scores))
    coords = np.array([b.as_tuple() for b in boxes])
    cats = np.array([b.category_id for b in boxes])
    ious = iou_matrix(coords, coords)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) == top_k:
            break
        suppressed |= (cats == cats[i]) & (ious[i] >= iou_threshold)
    return [boxes[i] for i in keep]


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # monotone precision envelope, right to left
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(preds: Sequence[Sequence[BoundingBox]],
                      gts: Sequence[Sequence[BoundingBox]],
                      iou_threshold: float = 0.5) -> float:
    """101-point interpolated AP, averaged over categories that have ground truth.

    ``preds[i]`` and ``gts[i]`` are the scored detections and annotations of
    image ``i``. Detections are matched greedily in descending score order to
    the unmatched same-category ground truth of highest IoU.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    categories = sorted({b.category_id for img in gts for b in img})
    if not categories:
        raise ValueError("no ground-truth boxes; AP is undefined")
    aps = []
    for cat in categories:
        gt_per_image = [[b for b in img if b.category_id == cat] for img in gts]
        n_gt = sum(len(g) for g in gt_per_image)
        dets = [(b.score if b.score is not None else 0.0, i, j, b)
                for i, img in enumerate(preds) for j, b in enumerate(img) if b.category_id == cat]
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        matched = [np.zeros(len(g), dtype=bool) for g in gt_per_image]
        tp = np.zeros(len(dets))
        for k, (_, i, _, box) in enumerate(dets):
            g = gt_per_image[i]
            if not g:
                continue
            ious = iou_matrix([box.as_tuple()], [b.as_tuple() for b in g])[0]
            ious[matched[i]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[i][best] = True
                tp[k] = 1.0
        aps.append(_interpolated_ap(tp, n_gt))
    return float(np.mean(aps))


def ap_summary(preds, gts) -> dict:
    """AP averaged over IoU 0.50:0.05:0.95 together with AP50 and AP75."""
    per_thr = {t: average_precision(preds, gts, t) for t in AP_IOU_THRESHOLDS}
    return {"ap": float(np.mean(list(per_thr.values()))),
            "ap50": per_thr[0.5], "ap75": per_thr[0.75]}


def gaze_auc(m: np.ndarray, gt_binary: np.ndarray) -> float:
    """ROC AUC of heatmap cells as scores against binary cell labels."""
    m = np.asarray(m, dtype=float)
    gt = np.asarray(gt_binary)
    if m.shape != gt.shape:
        raise ValueError(f"heatmap shape {m.shape} != label shape {gt.shape}")
    labels = gt.ravel().astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("AUC needs at least one positive and one negative cell")
    return float(roc_auc_score(labels, m.ravel()))


def l2_distance(pred_point, gt_point) -> float:
    return float(np.linalg.norm(np.asarray(pred_point, float) - np.asarray(gt_point, float)))


def angular_error(pred: GazeVector, gt: GazeVector) -> float:
    """Angle in degrees between two gaze directions."""
    a, b = pred.direction(), gt.direction()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("angular error is undefined for a zero-length gaze vector")
    # atan2 stays accurate near 0 and 180 degrees, unlike arccos
    cross = a[0] * b[1] - a[1] * b[0]
    return float(np.degrees(np.arctan2(abs(cross), np.dot(a, b))))


def heatmap_argmax_point(m: np.ndarray) -> tuple[float, float]:
    """Normalized ``(x, y)`` of the center of the hottest cell."""
    m = np.asarray(m)
    i, j = np.unravel_index(int(np.argmax(m)), m.shape)
    return ((j + 0.5) / m.shape[1], (i + 0.5) / m.shape[0])


@dataclass
class MetricReport:
    auc: float
    l2_dist: float
    angular_err: float
    ap: float
    ap50: float
    ap75: float
    wuoc_mean: float
    sample_count: int
    # bottleneck-analysis variants: boxes selected with the GT heatmap, and
    # GT boxes selected with the predicted heatmap
    wuoc_gt_gaze: Optional[float] = None
    wuoc_gt_boxes: Optional[float] = None
    # AUC with every cell within 3 sigma of the gaze cell counted positive
    auc_3sigma: Optional[float] = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("a metric report needs at least one sample")
        for name, value in asdict(self).items():
            if value is not None and not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite: {value}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


@dataclass
class ImageRecord:
    """One line of the predictions/annotations JSON-lines interchange."""

    image_id: str
    boxes: list[BoundingBox]
    gaze_point: tuple[float, float]
    gaze_box_index: Optional[int]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "boxes": [b.to_dict() for b in self.boxes],
            "gaze_point": [float(self.gaze_point[0]), float(self.gaze_point[1])],
            "gaze_box_index": self.gaze_box_index,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        known = {"image_id", "boxes", "gaze_point", "gaze_box_index"}
        missing = known - d.keys()
        if missing:
            raise KeyError(f"record is missing fields {sorted(missing)}")
        boxes = [BoundingBox.from_dict(b) for b in d["boxes"]]
        idx = d["gaze_box_index"]
        if idx is not None and not 0 <= idx < len(boxes):
            raise ValueError(f"gaze_box_index {idx} out of range for {len(boxes)} boxes")
        gp = d["gaze_point"]
        return cls(str(d["image_id"]), boxes, (float(gp[0]), float(gp[1])),
                   None if idx is None else int(idx),
                   {k: v for k, v in d.items() if k not in known})


def write_records(path, records: Iterable[ImageRecord]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    tmp.replace(path)


def read_records(path) -> list[ImageRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(ImageRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return records
