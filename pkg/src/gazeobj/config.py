"""Configuration dataclasses and TOML/JSON loading."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli

DEFAULT_ANCHORS = ((12, 16), (19, 40), (28, 64))


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 224
    stem_channels: int = 16
    widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    gaze_channels: int = 64
    head_loc_channels: tuple = (8, 16, 32, 32, 32)
    neck_channels: int = 64
    det_channels: int = 32
    ratio: int = 2
    anchors: tuple = DEFAULT_ANCHORS
    num_classes: int = 24
    heatmap_size: int = 64
    # architecture switches; the defaults give the full model
    share_backbone: bool = True
    input_specific: bool = True
    gaze_specific: bool = True
    upsample: str = "defocus"
    num_det_heads: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.head_loc_channels = tuple(int(c) for c in self.head_loc_channels)
        self.anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        self.validate()

    def validate(self):
        if len(self.widths) != 4 or min(self.widths) < 1 or self.stem_channels < 1:
            raise ConfigError(f"need four positive stage widths, got {self.widths}")
        r2 = self.ratio ** 2
        if self.ratio < 2:
            raise ConfigError(f"defocus ratio must be >= 2, got {self.ratio}")
        for w in self.widths[1:]:
            if w % r2:
                raise ConfigError(f"stage width {w} is not divisible by r^2 = {r2}")
        if self.neck_channels % r2 or self.det_channels % r2:
            raise ConfigError("neck and detection widths must be divisible by r^2")
        if self.image_size % 32:
            raise ConfigError(f"image size must be a multiple of 32, got {self.image_size}")
        if len(self.head_loc_channels) != 5:
            raise ConfigError("the head-location encoder has exactly five layers")
        if self.upsample not in ("defocus", "interpolate"):
            raise ConfigError(f"upsample must be 'defocus' or 'interpolate', got {self.upsample!r}")
        if self.num_det_heads not in (1, 3):
            raise ConfigError("num_det_heads must be 1 or 3")
        if not self.anchors or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ConfigError(f"anchors must have positive sizes, got {self.anchors}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    @property
    def det_grid(self) -> int:
        # C3 has stride 8 and is enlarged once by the defocus ratio
        return (self.image_size // 8) * self.ratio

    @property
    def det_stride(self) -> float:
        return self.image_size / self.det_grid

    @property
    def c5_size(self) -> int:
        return self.image_size // 32


@dataclass
class LossWeights:
    det: float = 1.0
    gaze: float = 1.0
    eng: float = 1.0

    def __post_init__(self):
        if min(self.det, self.gaze, self.eng) < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    max_steps: Optional[int] = None
    sigma: float = 3.0
    seed: int = 0
    augment: bool = False
    train_data: Optional[str] = None
    val_data: Optional[str] = None
    output_dir: str = "runs/default"
    checkpoint_every: int = 500
    log_every: int = 10
    nms_threshold: float = 0.3
    top_k: int = 100
    conf_threshold: float = 0.05

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1 and self.max_steps is None:
            raise ConfigError("need epochs >= 1 or max_steps")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix == ".toml":
            data = tomli.loads(text)
        else:
            data = json.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(data)
