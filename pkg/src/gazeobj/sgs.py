"""Specific-general-specific feature extractor.

Scene and head images each pass an input-specific stem, then one shared
residual backbone. Task-specific blocks follow: the scene pyramid is
defocused for detection, and the scene and head C5 maps go through separate
1x1 convolutions for the gaze branch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .defocus import Defocus


def norm(channels: int) -> nn.GroupNorm:
    # group norm keeps train and eval behaviour identical at tiny batch sizes
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ConvNormAct(nn.Sequential):
    def __init__(self, c_in, c_out, k=3, stride=1, act=True):
        layers = [nn.Conv2d(c_in, c_out, k, stride, k // 2, bias=False), norm(c_out)]
        if act:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = ConvNormAct(c_in, c_out, 3, stride)
        self.conv2 = ConvNormAct(c_out, c_out, 3, 1, act=False)
        self.shortcut = (nn.Identity() if stride == 1 and c_in == c_out
                         else ConvNormAct(c_in, c_out, 1, stride, act=False))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.conv2(self.conv1(x)) + self.shortcut(x))


class InputStem(nn.Sequential):
    """Stride-2 7x7 convolution, normalization and ReLU."""

    def __init__(self, stem_channels: int):
        super().__init__(ConvNormAct(3, stem_channels, 7, 2))


class Backbone(nn.Module):
    """Four residual stages, each halving the resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_in = cfg.stem_channels
        stages = []
        for width in cfg.widths:
            blocks = [BasicBlock(c_in, width, 2)]
            blocks += [BasicBlock(width, width) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            c_in = width
        self.stages = nn.ModuleList(stages)

    def forward(self, f):
        feats = {}
        for name, stage in zip(("c2", "c3", "c4", "c5"), self.stages):
            f = stage(f)
            feats[name] = f
        return {k: feats[k] for k in ("c3", "c4", "c5")}


@dataclass
class SgsOutputs:
    f_det: list  # defocused [C3, C4, C5] scene levels, finest first
    f_gaze_scene: torch.Tensor
    f_gaze_head: torch.Tensor


class DetUpsample(nn.Module):
    """Doubles resolution and divides channels by r^2, by Defocus or by
    1x1 compression followed by bilinear interpolation."""

    def __init__(self, channels: int, r: int, mode: str = "defocus"):
        super().__init__()
        self.mode = mode
        if mode == "defocus":
            self.op = Defocus(r)
        else:
            self.op = nn.Sequential(
                nn.Conv2d(channels, channels // (r * r), 1, bias=False),
                nn.Upsample(scale_factor=r, mode="bilinear", align_corners=False),
            )

    def forward(self, x):
        return self.op(x)


class SGSExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.psi_scene = InputStem(cfg.stem_channels)
        # without input-specific blocks both images share one stem
        self.psi_head = InputStem(cfg.stem_channels) if cfg.input_specific else self.psi_scene
        self.backbone = Backbone(cfg)
        # baseline with a dedicated head backbone, for parameter comparisons
        self.head_backbone = None if cfg.share_backbone else Backbone(cfg)
        self.det_blocks = nn.ModuleList(
            DetUpsample(w, cfg.ratio, cfg.upsample) for w in cfg.widths[1:])
        c5 = cfg.widths[-1]
        if cfg.gaze_specific:
            self.phi_scene = nn.Conv2d(c5, cfg.gaze_channels, 1)
            self.phi_head = nn.Conv2d(c5, cfg.gaze_channels, 1)
        else:
            self.phi_scene = self.phi_head = nn.Identity()

    @property
    def gaze_channels(self) -> int:
        return self.cfg.gaze_channels if self.cfg.gaze_specific else self.cfg.widths[-1]

    def input_specific(self, scene, head):
        return self.psi_scene(scene), self.psi_head(head)

    def shared_backbone(self, f, head: bool = False):
        if head and self.head_backbone is not None:
            return self.head_backbone(f)
        return self.backbone(f)

    def task_specific(self, pyramid: dict, c5_head) -> SgsOutputs:
        f_det = [blk(pyramid[k]) for blk, k in zip(self.det_blocks, ("c3", "c4", "c5"))]
        return SgsOutputs(f_det, self.phi_scene(pyramid["c5"]), self.phi_head(c5_head))

    def forward(self, scene, head) -> SgsOutputs:
        f_sp_scene, f_sp_head = self.input_specific(scene, head)
        pyr_scene = self.shared_backbone(f_sp_scene)
        pyr_head = self.shared_backbone(f_sp_head, head=True)
        return self.task_specific(pyr_scene, pyr_head["c5"])


def count_parameters(module: nn.Module) -> int:
    # shared submodules are counted once
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_count(cfg: ModelConfig, variant: str = "sgs_shared") -> int:
    """Trainable parameters of the extractor.

    ``two_backbone_baseline`` is the conventional two-network layout: the
    head image gets its own stem and its own backbone and no gaze-specific
    output convolutions exist.
    """
    from dataclasses import replace

    if variant == "sgs_shared":
        return count_parameters(SGSExtractor(replace(cfg, share_backbone=True)))
    if variant == "two_backbone_baseline":
        return count_parameters(SGSExtractor(replace(cfg, share_backbone=False,
                                                        gaze_specific=False)))
    raise ValueError(f"unknown variant {variant!r}")
