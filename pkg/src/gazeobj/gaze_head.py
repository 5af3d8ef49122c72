"""Gaze heatmap branch with head-delay.

The head-location mask never enters the shared backbone; it is encoded here,
after the backbone, by five stride-2 convolutions (scene side) and three
max-pools (attention side).
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .sgs import ConvNormAct, norm


def head_location_mask(head_box, image_size: int) -> torch.Tensor:
    """Binary ``(1, S, S)`` mask that is 1 on pixels whose centers lie in the head box."""
    x1, y1, x2, y2 = head_box
    c = torch.arange(image_size, dtype=torch.float32) + 0.5
    in_x = (c >= x1) & (c <= x2)
    in_y = (c >= y1) & (c <= y2)
    mask = (in_y[:, None] & in_x[None, :]).float()[None]
    if mask.sum() == 0:
        raise ValueError(f"head box {tuple(head_box)} covers no pixel")
    return mask


class HeadLocationEncoder(nn.Module):
    """Five stride-2 convolutions taking the mask down to C5 resolution."""

    def __init__(self, channels=(8, 16, 32, 32, 32)):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers.append(ConvNormAct(c_in, c, 3, 2))
            c_in = c
        self.layers = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, mask):
        if (mask.flatten(1).sum(1) == 0).any():
            raise ValueError("head location mask is empty")
        return self.layers(mask)


class HeadAttention(nn.Module):
    """Attention over the C5 grid from the pooled mask and the head feature."""

    def __init__(self, image_size: int, head_channels: int, grid: int):
        super().__init__()
        self.pool = nn.MaxPool2d(3, 2, 1)
        pooled = image_size // 8
        self.grid = grid
        self.fc = nn.Linear(pooled * pooled + head_channels, grid * grid)

    def forward(self, mask, f_gaze_head):
        m = self.pool(self.pool(self.pool(mask))).flatten(1)
        h = F.adaptive_avg_pool2d(f_gaze_head, 1).flatten(1)
        a = torch.sigmoid(self.fc(torch.cat([m, h], dim=1)))
        return a.view(-1, 1, self.grid, self.grid)


class HeatmapDecoder(nn.Module):
    """Scene fusion, attention gating, two-conv encoder, three-deconv decoder."""

    def __init__(self, scene_channels: int, loc_channels: int, heatmap_size: int,
                 widths=(64, 32, 32, 16, 8)):
        super().__init__()
        fuse, enc, d1, d2, d3 = widths
        self.fuse = ConvNormAct(scene_channels + loc_channels, fuse, 1)
        self.encoder = nn.Sequential(ConvNormAct(fuse, enc, 3), ConvNormAct(enc, enc, 3))

        def deconv(c_in, c_out):
            return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False),
                                 norm(c_out), nn.ReLU(inplace=True))

        self.decoder = nn.Sequential(deconv(enc, d1), deconv(d1, d2), deconv(d2, d3))
        self.out = nn.Conv2d(d3, 1, 1)
        self.heatmap_size = heatmap_size

    def forward(self, f_gaze_scene, loc_feature, attention):
        x = self.fuse(torch.cat([f_gaze_scene, loc_feature], dim=1))
        x = self.encoder(x * attention)
        x = self.out(self.decoder(x))
        x = F.interpolate(x, size=(self.heatmap_size,) * 2, mode="bilinear",
                          align_corners=False)
        return torch.sigmoid(x)[:, 0]


class GazeHead(nn.Module):
    def __init__(self, cfg: ModelConfig, gaze_channels: int):
        super().__init__()
        self.encode_head_location = HeadLocationEncoder(cfg.head_loc_channels)
        self.head_attention = HeadAttention(cfg.image_size, gaze_channels, cfg.c5_size)
        self.predict_heatmap = HeatmapDecoder(
            gaze_channels, self.encode_head_location.out_channels, cfg.heatmap_size)

    def forward(self, f_gaze_scene, f_gaze_head, mask):
        """Return ``(heatmap (B, Hm, Wm), attention (B, 1, g, g))``."""
        loc = self.encode_head_location(mask)
        att = self.head_attention(mask, f_gaze_head)
        return self.predict_heatmap(f_gaze_scene, loc, att), att
