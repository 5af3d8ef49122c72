"""Gaze-side objectives: Gaussian targets, heatmap MSE, energy aggregation."""
from __future__ import annotations

import math

import numpy as np
import torch

from .config import LossWeights
from .geometry import BoundingBox, box_mean_energy

ENERGY_EPS = 1e-12


def quantize_point(q, size: int) -> tuple[int, int]:
    """Heatmap cell ``(row, col)`` containing normalized point ``q = (x, y)``."""
    col = min(max(int(math.floor(q[0] * size)), 0), size - 1)
    row = min(max(int(math.floor(q[1] * size)), 0), size - 1)
    return row, col


def gaussian_gt_heatmap(q, size: int = 64, sigma_x: float = 3.0,
                        sigma_y: float = 3.0) -> np.ndarray:
    """Gaussian target centred on the quantized gaze cell, peak normalized to 1."""
    if not (0.0 <= q[0] <= 1.0 and 0.0 <= q[1] <= 1.0):
        raise ValueError(f"gaze point must be normalized to [0, 1], got {tuple(q)}")
    row, col = quantize_point(q, size)
    y, x = np.mgrid[0:size, 0:size].astype(float)
    raw = np.exp(-0.5 * ((x - col) ** 2 / sigma_x ** 2 + (y - row) ** 2 / sigma_y ** 2))
    raw /= 2 * math.pi * sigma_x * sigma_y
    return raw / raw.max()


def gaze_point_mask(q, size: int = 64) -> np.ndarray:
    """Binary ``(size, size)`` map with a single positive at the gaze cell."""
    out = np.zeros((size, size), dtype=bool)
    out[quantize_point(q, size)] = True
    return out


def sigma_disk_mask(t: np.ndarray, n_sigma: float = 3.0) -> np.ndarray:
    """Cells of a normalized Gaussian target within ``n_sigma`` deviations of its peak."""
    return np.asarray(t) >= math.exp(-0.5 * n_sigma ** 2) - 1e-12


def gaze_mse_loss(m, t):
    if tuple(m.shape) != tuple(t.shape):
        raise ValueError(f"heatmap shape {tuple(m.shape)} != target shape {tuple(t.shape)}")
    return ((m - t) ** 2).mean()


def energy_aggregation_loss(m, gaze_box: BoundingBox, image_size):
    """``-E_box / E_image`` for one ``(Hm, Wm)`` heatmap (numpy or torch).

    The image mean is floored at ``ENERGY_EPS`` so an all-zero heatmap gives a
    finite value instead of a division by zero.
    """
    e_box = box_mean_energy(m, gaze_box, image_size)
    if isinstance(m, np.ndarray):
        if float(m.min()) < 0:
            raise ValueError("energy loss expects a non-negative heatmap")
        return -e_box / max(float(m.mean()), ENERGY_EPS)
    return -e_box / m.mean().clamp(min=ENERGY_EPS)


def batch_energy_loss(heatmaps: torch.Tensor, gaze_boxes, image_size) -> torch.Tensor:
    return torch.stack([energy_aggregation_loss(h, b, image_size)
                        for h, b in zip(heatmaps, gaze_boxes)]).mean()


def total_loss(l_det, l_gaze, l_eng, weights: LossWeights = LossWeights()):
    for name, v in (("l_det", l_det), ("l_gaze", l_gaze), ("l_eng", l_eng)):
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x):
            raise FloatingPointError(f"non-finite loss component {name} = {x}")
    return weights.det * l_det + weights.gaze * l_gaze + weights.eng * l_eng
