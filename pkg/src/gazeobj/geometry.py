"""Box algebra and heatmap/box interaction.

Boxes are axis-aligned ``(x1, y1, x2, y2)`` rectangles in image pixel
coordinates. Heatmaps are 2-D grids covering the whole image; cell ``(i, j)``
spans ``[j * W / Wm, (j + 1) * W / Wm)`` horizontally and the analogous range
vertically.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    category_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must have positive area: {coords}")
        if self.category_id < 0:
            raise ValueError(f"category_id must be >= 0, got {self.category_id}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["score"] is None:
            del d["score"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(
            float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]),
            int(d.get("category_id", 0)),
            None if d.get("score") is None else float(d["score"]),
        )


@dataclass(frozen=True)
class GazeVector:
    """Gaze direction from the head center ``origin`` to the gaze ``target``."""

    origin: tuple[float, float]
    target: tuple[float, float]

    def direction(self) -> np.ndarray:
        return np.asarray(self.target, dtype=float) - np.asarray(self.origin, dtype=float)


def intersection_area(p: BoundingBox, g: BoundingBox) -> float:
    w = min(p.x2, g.x2) - max(p.x1, g.x1)
    h = min(p.y2, g.y2) - max(p.y1, g.y1)
    return max(w, 0.0) * max(h, 0.0)


def union_area(p: BoundingBox, g: BoundingBox) -> float:
    return p.area + g.area - intersection_area(p, g)


def closure(p: BoundingBox, g: BoundingBox) -> BoundingBox:
    """Smallest axis-aligned box enclosing both ``p`` and ``g``."""
    return BoundingBox(min(p.x1, g.x1), min(p.y1, g.y1), max(p.x2, g.x2), max(p.y2, g.y2))


def iou(p: BoundingBox, g: BoundingBox) -> float:
    return intersection_area(p, g) / union_area(p, g)


def uoc(p: BoundingBox, g: BoundingBox) -> float:
    """Union area over the area of the minimum closure."""
    return union_area(p, g) / closure(p, g).area


def wuoc(p: BoundingBox, g: BoundingBox) -> float:
    """Union-over-closure weighted by the smaller-to-larger area ratio.

    Unlike IoU it stays informative for disjoint boxes (it decays as the
    closure grows) and for nested boxes (the area weight penalises the size
    mismatch).

    >>> wuoc(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 20))
    0.5
    """
    size_weight = min(p.area / g.area, g.area / p.area)
    return size_weight * uoc(p, g)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def box_cell_mask(box: BoundingBox, grid_shape: tuple[int, int],
                  image_size: tuple[float, float]) -> np.ndarray:
    """Boolean ``(Hm, Wm)`` mask of heatmap cells whose centers lie inside ``box``.

    ``image_size`` is ``(W, H)``. Membership is inclusive on both edges.
    """
    hm, wm = grid_shape
    width, height = image_size
    if hm < 1 or wm < 1 or width <= 0 or height <= 0:
        raise ValueError(f"invalid grid {grid_shape} or image size {image_size}")
    cx = (np.arange(wm) + 0.5) * (width / wm)
    cy = (np.arange(hm) + 0.5) * (height / hm)
    in_x = (cx >= box.x1) & (cx <= box.x2)
    in_y = (cy >= box.y1) & (cy <= box.y2)
    return in_y[:, None] & in_x[None, :]


def box_mean_energy(m, box: BoundingBox, image_size: tuple[float, float]):
    """Mean heatmap value over the cells covered by ``box``.

    ``m`` may be a numpy array or a torch tensor of shape ``(Hm, Wm)``; the
    result has the same array type (a 0-d tensor keeps the autograd graph).
    Raises ``ValueError`` when the box covers no cell center.
    """
    grid_shape = tuple(m.shape[-2:])
    mask = box_cell_mask(box, grid_shape, image_size)
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"box {box.as_tuple()} covers no cell of a {grid_shape} heatmap")
    if isinstance(m, np.ndarray):
        return float(m[mask].mean())
    import torch

    return m[torch.as_tensor(mask, device=m.device)].mean()


def select_gaze_index(m, boxes: Sequence[BoundingBox],
                      image_size: tuple[float, float]) -> int:
    """Index of the box with the highest mean heatmap energy.

    Ties go to the higher detection score, then to the lower index. Boxes too
    small to cover a cell center score ``-inf``.
    """
    if len(boxes) == 0:
        raise ValueError("cannot select a gaze object from an empty box list")
    m = np.asarray(m, dtype=float)
    best_key, best = None, -1
    for idx, box in enumerate(boxes):
        try:
            energy = box_mean_energy(m, box, image_size)
        except ValueError:
            energy = -math.inf
        score = box.score if box.score is not None else 0.0
        key = (energy, score, -idx)
        if best_key is None or key > best_key:
            best_key, best = key, idx
    return best


def select_gaze_object(m, boxes: Sequence[BoundingBox],
                       image_size: tuple[float, float]) -> BoundingBox:
    return boxes[select_gaze_index(m, boxes, image_size)]
