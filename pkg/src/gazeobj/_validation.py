"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .data import Sample


def check_image(image, name: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {image.dtype}")
    return image


def check_head_box(head_box, width: int, height: int) -> tuple:
    try:
        x1, y1, x2, y2 = (float(v) for v in head_box)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"head box must be four numbers, got {head_box!r}") from exc
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise ValueError(f"head box {(x1, y1, x2, y2)} is not inside the {width}x{height} image")
    return (x1, y1, x2, y2)


def check_samples(samples, image_size: int, require_labels: bool = True) -> list[Sample]:
    """Materialize ``samples`` and verify images, head boxes and annotations."""
    samples = list(samples)
    if not samples:
        raise ValueError("expected at least one sample")
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample objects, got {type(s).__name__}")
        check_image(s.image, f"sample {s.image_id} image")
        check_image(s.head_image, f"sample {s.image_id} head image")
        if s.image.shape[:2] != (image_size, image_size):
            raise ValueError(f"sample {s.image_id} is {s.image.shape[1]}x{s.image.shape[0]}, "
                             f"model expects {image_size}x{image_size}")
        check_head_box(s.head_box, image_size, image_size)
        if require_labels:
            if not s.boxes:
                raise ValueError(f"sample {s.image_id} has no boxes")
            if not 0 <= s.gaze_box_index < len(s.boxes):
                raise ValueError(f"sample {s.image_id} gaze_box_index {s.gaze_box_index} "
                                 f"out of range for {len(s.boxes)} boxes")
            gx, gy = s.gaze_point
            if not (0 <= gx <= 1 and 0 <= gy <= 1):
                raise ValueError(f"sample {s.image_id} gaze point {s.gaze_point} is not normalized")
    return samples


def check_heatmap(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"heatmap must be a non-empty 2-D array, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("heatmap contains non-finite values")
    if m.min() < 0:
        raise ValueError("heatmap must be non-negative")
    return m

