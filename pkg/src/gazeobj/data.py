"""Deterministic synthetic retail scenes and their on-disk dataset format.

A scene is a shelf of products on a jittered K x K grid above a floor strip
where a head is drawn. Each product's category sets its colour and stripe
texture. The head carries a tick pointing at the gaze point, which is the
centre of one uniformly chosen product.

Dataset layout::

    root/spec.json          SceneSpec used to generate the set
    root/annotations.jsonl  one ImageRecord per image (+ head_box)
    root/images/{id}.png    scene images
    root/heads/{id}.png     head crops
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image, ImageDraw

from .geometry import BoundingBox
from .metrics import ImageRecord

log = logging.getLogger(__name__)

SHELF_MARGIN = 8
FLOOR_HEIGHT = 48
HEAD_RADIUS = 13
HEAD_CROP_MARGIN = 6


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 224
    grid: int = 8
    num_classes: int = 24
    jitter: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.grid < 1 or self.num_classes < 1:
            raise ValueError(f"grid and num_classes must be >= 1: {self}")
        shelf_bottom = self.image_size - FLOOR_HEIGHT
        if shelf_bottom <= SHELF_MARGIN + self.grid:
            raise ValueError(f"image size {self.image_size} leaves no room for the shelf")
        if self.image_size < 2 * (HEAD_RADIUS + SHELF_MARGIN):
            raise ValueError(f"image size {self.image_size} cannot hold the head")

    @property
    def shelf_box(self) -> tuple[float, float, float, float]:
        return (SHELF_MARGIN, SHELF_MARGIN, self.image_size - SHELF_MARGIN,
                self.image_size - FLOOR_HEIGHT)


@dataclass
class Sample:
    image_id: str
    image: np.ndarray          # (H, W, 3) uint8
    head_image: np.ndarray     # (H, W, 3) uint8, crop resized to the scene size
    head_box: tuple            # (x1, y1, x2, y2) pixels
    gaze_point: tuple          # normalized (x, y)
    gaze_box_index: int
    boxes: list = field(default_factory=list)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image.shape[1], self.image.shape[0])

    @property
    def gaze_box(self) -> BoundingBox:
        return self.boxes[self.gaze_box_index]

    def head_mask(self) -> np.ndarray:
        """``(H, W)`` float mask, 1 on pixels whose centres lie inside the head box."""
        h, w = self.image.shape[:2]
        x1, y1, x2, y2 = self.head_box
        cx = np.arange(w) + 0.5
        cy = np.arange(h) + 0.5
        return (((cy >= y1) & (cy <= y2))[:, None] & ((cx >= x1) & (cx <= x2))[None, :]).astype(np.float32)

    def to_record(self) -> ImageRecord:
        return ImageRecord(self.image_id, list(self.boxes), self.gaze_point, self.gaze_box_index,
                           {"head_box": [float(v) for v in self.head_box]})


def category_palette(num_classes: int) -> list[tuple[tuple[int, int, int], int]]:
    """``(rgb, texture)`` per category: eight hues times three textures."""
    n_hues = min(8, num_classes)
    out = []
    for c in range(num_classes):
        hue = (c % n_hues) / n_hues
        texture = (c // n_hues) % 3
        value = 0.95 - 0.25 * ((c // (3 * n_hues)) % 2)
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, value)
        out.append(((int(r * 255), int(g * 255), int(b * 255)), texture))
    return out


def _draw_product(draw: ImageDraw.ImageDraw, box, rgb, texture):
    x1, y1, x2, y2 = box
    draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=rgb, outline=(20, 20, 20))
    dark = tuple(int(v * 0.45) for v in rgb)
    if texture == 1:
        for y in range(int(y1) + 3, int(y2) - 2, 4):
            draw.line([x1 + 2, y, x2 - 3, y], fill=dark)
    elif texture == 2:
        for x in range(int(x1) + 3, int(x2) - 2, 4):
            draw.line([x, y1 + 2, x, y2 - 3], fill=dark)


def _rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    """Render scene ``index``; a pure function of ``(spec, index)``."""
    rng = _rng(spec, index)
    size = spec.image_size
    sx1, sy1, sx2, sy2 = spec.shelf_box
    cell_w = (sx2 - sx1) / spec.grid
    cell_h = (sy2 - sy1) / spec.grid
    palette = category_palette(spec.num_classes)

    img = Image.new("RGB", (size, size), (200, 196, 188))
    draw = ImageDraw.Draw(img)
    draw.rectangle([sx1 - 2, sy1 - 2, sx2 + 1, sy2 + 1], fill=(120, 100, 80))
    for row in range(1, spec.grid):
        y = sy1 + row * cell_h
        draw.line([sx1, y, sx2, y], fill=(90, 70, 55))

    boxes = []
    for row in range(spec.grid):
        for col in range(spec.grid):
            w = int(np.clip(round(cell_w * rng.uniform(0.62, 0.8)), 8, 80))
            h = int(np.clip(round(cell_h * rng.uniform(0.62, 0.8)), 8, 80))
            cx = sx1 + (col + 0.5) * cell_w + rng.uniform(-spec.jitter, spec.jitter)
            cy = sy1 + (row + 0.5) * cell_h + rng.uniform(-spec.jitter, spec.jitter)
            x1 = int(round(cx - w / 2))
            y1 = int(round(cy - h / 2))
            cat = int(rng.integers(spec.num_classes))
            box = BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h), cat)
            rgb, texture = palette[cat]
            _draw_product(draw, box.as_tuple(), rgb, texture)
            boxes.append(box)

    gaze_idx = int(rng.integers(len(boxes)))
    gx, gy = boxes[gaze_idx].center

    hx = float(rng.uniform(HEAD_RADIUS + SHELF_MARGIN, size - HEAD_RADIUS - SHELF_MARGIN))
    hy = size - FLOOR_HEIGHT / 2
    head_box = (hx - HEAD_RADIUS, hy - HEAD_RADIUS, hx + HEAD_RADIUS, hy + HEAD_RADIUS)
    if head_box[1] <= sy2:
        raise ValueError("head region overlaps the shelf")
    draw.ellipse(head_box, fill=(235, 190, 160), outline=(60, 40, 30), width=2)
    d = np.array([gx - hx, gy - hy])
    d /= np.linalg.norm(d)
    tip = (hx + d[0] * (HEAD_RADIUS - 1), hy + d[1] * (HEAD_RADIUS - 1))
    draw.line([(hx, hy), tip], fill=(20, 20, 120), width=3)
    # eyes on the gaze side of the face
    for sgn in (-1, 1):
        ex = hx + d[0] * 6 - sgn * d[1] * 5
        ey = hy + d[1] * 6 + sgn * d[0] * 5
        draw.ellipse([ex - 2, ey - 2, ex + 2, ey + 2], fill=(10, 10, 10))

    image = np.asarray(img, dtype=np.uint8).copy()
    noise = rng.integers(-6, 7, size=image.shape)
    image = np.clip(image.astype(int) + noise, 0, 255).astype(np.uint8)
    head_image = crop_head(image, head_box)
    return Sample(f"{index:06d}", image, head_image, head_box,
                  (gx / size, gy / size), gaze_idx, boxes)


def crop_head(image: np.ndarray, head_box, margin: float = HEAD_CROP_MARGIN) -> np.ndarray:
    """Crop around the head box with a margin and resize to the scene size."""
    h, w = image.shape[:2]
    x1, y1, x2, y2 = head_box
    box = (max(0, int(x1 - margin)), max(0, int(y1 - margin)),
           min(w, int(np.ceil(x2 + margin))), min(h, int(np.ceil(y2 + margin))))
    if box[0] >= box[2] or box[1] >= box[3]:
        raise ValueError(f"head box {tuple(head_box)} lies outside the image")
    crop = Image.fromarray(image).crop(box).resize((w, h), Image.BILINEAR)
    return np.asarray(crop, dtype=np.uint8).copy()


# -- serialization -----------------------------------------------------------

def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_png(path: Path, array: np.ndarray) -> None:
    import io

    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    _atomic_write_bytes(path, buf.getvalue())


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing image file {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_dataset(spec: SceneSpec, n: int, path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "heads").mkdir(exist_ok=True)
    lines = []
    for i in range(n):
        s = generate_sample(spec, i)
        _write_png(root / "images" / f"{s.image_id}.png", s.image)
        _write_png(root / "heads" / f"{s.image_id}.png", s.head_image)
        lines.append(json.dumps(s.to_record().to_dict()))
    _atomic_write_bytes(root / "annotations.jsonl", ("\n".join(lines) + "\n").encode() if lines else b"")
    _atomic_write_bytes(root / "spec.json", json.dumps(asdict(spec), indent=2).encode())
    return root


def read_spec(path) -> Optional[SceneSpec]:
    p = Path(path) / "spec.json"
    if not p.exists():
        return None
    return SceneSpec(**json.loads(p.read_text()))


def read_dataset(path) -> Iterator[Sample]:
    """Yield samples lazily; malformed lines raise ``ValueError`` naming the line."""
    root = Path(path)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        log.warning("no annotations.jsonl in %s; dataset is empty", root)
        return
    with open(ann) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = ImageRecord.from_dict(json.loads(line))
                head_box = tuple(float(v) for v in rec.extra["head_box"])
                if rec.gaze_box_index is None:
                    raise ValueError("gaze_box_index is null")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{ann}:{lineno}: malformed record: {exc}") from exc
            yield Sample(rec.image_id, _read_png(root / "images" / f"{rec.image_id}.png"),
                         _read_png(root / "heads" / f"{rec.image_id}.png"), head_box,
                         rec.gaze_point, rec.gaze_box_index, rec.boxes)


def dataset_digest(path) -> str:
    """SHA-256 over annotations and every image file, in sorted order."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted([root / "annotations.jsonl", root / "spec.json",
                     *root.glob("images/*.png"), *root.glob("heads/*.png")]):
        if p.exists():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()
