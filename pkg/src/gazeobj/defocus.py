"""Defocus (channel-to-space) rearrangement, its inverse, and MAC accounting.

Sub-pixel order is block-row-major::

    out[c, r*i + di, r*j + dj] = x[c*r*r + di*r + dj, i, j]

Both functions accept numpy arrays and torch tensors with any number of
leading batch dimensions.
"""
from __future__ import annotations

import json

import numpy as np
import torch
from torch import nn


def _permute(x, axes):
    if isinstance(x, np.ndarray):
        return x.transpose(axes)
    return x.permute(axes)


def defocus(x, r: int = 2):
    """Shrink channels by ``r**2`` and enlarge height and width by ``r``."""
    if r < 2:
        raise ValueError(f"defocus ratio must be >= 2, got {r}")
    *lead, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} is not divisible by r^2 = {r * r}")
    n = len(lead)
    y = x.reshape(*lead, c // (r * r), r, r, h, w)
    # (..., C', di, dj, H, W) -> (..., C', H, di, W, dj)
    y = _permute(y, tuple(range(n)) + tuple(n + k for k in (0, 3, 1, 4, 2)))
    return y.reshape(*lead, c // (r * r), h * r, w * r)


def focus(y, r: int = 2):
    """Exact inverse of :func:`defocus`."""
    if r < 2:
        raise ValueError(f"focus ratio must be >= 2, got {r}")
    *lead, c, h, w = y.shape
    if h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} is not divisible by r = {r}")
    n = len(lead)
    x = y.reshape(*lead, c, h // r, r, w // r, r)
    # (..., C, H, di, W, dj) -> (..., C, di, dj, H, W)
    x = _permute(x, tuple(range(n)) + tuple(n + k for k in (0, 2, 4, 1, 3)))
    return x.reshape(*lead, c * r * r, h // r, w // r)


class Defocus(nn.Module):
    def __init__(self, r: int = 2):
        super().__init__()
        if r < 2:
            raise ValueError(f"defocus ratio must be >= 2, got {r}")
        self.r = r

    def forward(self, x):
        return defocus(x, self.r)

    def extra_repr(self):
        return f"r={self.r}"


class Focus(nn.Module):
    def __init__(self, r: int = 2):
        super().__init__()
        self.r = r

    def forward(self, x):
        return focus(x, self.r)

    def extra_repr(self):
        return f"r={self.r}"


# -- cost accounting --------------------------------------------------------

INTERP_SUPPORT = {"nearest": 1, "bilinear": 4, "bicubic": 16}


def stage_macs(stage: dict) -> int:
    """MACs of one stage of a stage-list document.

    Required keys per ``kind``:

    - ``conv`` / ``deconv``: ``c_in``, ``c_out``, ``k`` (or ``kh`` and ``kw``),
      ``h_out``, ``w_out``
    - ``interpolate``: ``channels``, ``h``, ``w``, ``factor``, optional ``mode``
    - ``defocus`` / ``focus`` / ``pool`` / ``concat``: free
    - ``linear``: ``in_features``, ``out_features``
    """
    kind = stage.get("kind")
    if kind in ("conv", "deconv"):
        kernel = stage.get("kh", stage.get("k")) * stage.get("kw", stage.get("k"))
        return int(stage["c_in"] * stage["c_out"] * kernel * stage["h_out"] * stage["w_out"])
    if kind == "interpolate":
        mode = stage.get("mode", "bilinear")
        if mode not in INTERP_SUPPORT:
            raise ValueError(f"unknown interpolation mode {mode!r}")
        f = stage["factor"]
        out_elems = stage["channels"] * stage["h"] * f * stage["w"] * f
        return int(out_elems * INTERP_SUPPORT[mode])
    if kind in ("defocus", "focus", "concat", "pool"):
        return 0
    if kind == "linear":
        return int(stage["in_features"] * stage["out_features"])
    raise ValueError(f"unknown stage kind {kind!r}")


def flop_count(stages: list[dict]) -> dict:
    """Multiply-accumulate count of a declarative stage list.

    Returns ``{"total_macs": int, "per_stage": [{"name", "kind", "macs"}]}``.
    """
    per_stage = []
    for i, st in enumerate(stages):
        per_stage.append({"name": st.get("name", f"stage{i}"), "kind": st.get("kind"),
                          "macs": stage_macs(st)})
    return {"total_macs": sum(s["macs"] for s in per_stage), "per_stage": per_stage}


def flop_count_json(document: str) -> str:
    doc = json.loads(document)
    stages = doc["stages"] if isinstance(doc, dict) else doc
    return json.dumps(flop_count(stages), indent=2)


def module_stages(model: nn.Module, *inputs) -> list[dict]:
    """Trace conv/deconv/linear/interpolate/defocus costs of one forward pass.

    Uses forward hooks, so only ``nn.Module`` leaves are seen; functional
    interpolation must go through :class:`Upsample`-style modules.
    """
    stages: list[dict] = []

    def hook(mod, args, out):
        name = names[mod]
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            kh, kw = mod.kernel_size
            stages.append({"name": name, "kind": "conv" if isinstance(mod, nn.Conv2d) else "deconv",
                           "c_in": mod.in_channels // mod.groups, "c_out": mod.out_channels,
                           "kh": kh, "kw": kw, "h_out": out.shape[-2], "w_out": out.shape[-1]})
        elif isinstance(mod, nn.Linear):
            stages.append({"name": name, "kind": "linear", "in_features": mod.in_features,
                           "out_features": mod.out_features})
        elif isinstance(mod, nn.Upsample):
            x = args[0]
            stages.append({"name": name, "kind": "interpolate", "channels": x.shape[-3],
                           "h": x.shape[-2], "w": x.shape[-1], "factor": int(mod.scale_factor),
                           "mode": mod.mode})
        elif isinstance(mod, (Defocus, Focus)):
            x = args[0]
            stages.append({"name": name, "kind": mod.__class__.__name__.lower(),
                           "channels": x.shape[-3], "h": x.shape[-2], "w": x.shape[-1], "r": mod.r})

    names = {m: n for n, m in model.named_modules()}
    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, nn.Upsample,
                                 Defocus, Focus))]
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for h in handles:
            h.remove()
    return stages
