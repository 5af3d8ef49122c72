"""Full network: SGS extractor feeding the detection and gaze branches."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .detection import DetectionBranch
from .gaze_head import GazeHead
from .sgs import SGSExtractor

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` uint8 image to a normalized ``(3, H, W)`` float tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    x = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


class GazeObjectNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = SGSExtractor(cfg)
        self.detector = DetectionBranch(cfg)
        self.gaze = GazeHead(cfg, self.extractor.gaze_channels)

    def forward(self, scene, head, mask):
        s = self.cfg.image_size
        for name, x in (("scene", scene), ("head", head)):
            if tuple(x.shape[1:]) != (3, s, s):
                raise ValueError(f"{name} batch has shape {tuple(x.shape)}, expected (B, 3, {s}, {s})")
        feats = self.extractor(scene, head)
        raw = self.detector(feats.f_det)
        heatmap, attention = self.gaze(feats.f_gaze_scene, feats.f_gaze_head, mask)
        return {"det": raw, "heatmap": heatmap, "attention": attention}


def model_flop_count(cfg: ModelConfig) -> dict:
    """MACs of one forward pass of a freshly built network, per traced stage."""
    from .defocus import flop_count, module_stages

    s = cfg.image_size
    mask = torch.zeros(1, 1, s, s)
    mask[..., s - 32:s - 8, 8:32] = 1.0
    model = GazeObjectNet(cfg).eval()
    return flop_count(module_stages(model, torch.zeros(1, 3, s, s), torch.zeros(1, 3, s, s), mask))
