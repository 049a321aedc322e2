"""Synthetic weakly-labelled images with known boxes, and an on-disk layout.

Directory layout::

    images/<id>.pgm      8-bit grayscale (PNG accepted when reading)
    labels.csv           image_id, c0 .. c{K-1}
    boxes.csv            image_id, class_id, cx, cy, w, h

A class without a row in ``boxes.csv`` has no annotation; in memory that is
``None`` in ``SampleRecord.boxes``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .regions import Box

SHAPE_FAMILIES = ("blob", "rect", "ring", "cross")


class DataError(Exception):
    """Malformed or missing dataset content."""


@dataclass
class SampleRecord:
    image_id: str
    image: np.ndarray  # (3, H, W) in [0, 1]
    labels: np.ndarray  # (K,) of {0, 1}
    boxes: list[Box | None]

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def annotated(self) -> bool:
        return any(b is not None for b in self.boxes)


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (128, 128)
    num_classes: int = 4
    shapes: tuple[str, ...] = SHAPE_FAMILIES
    size_range: tuple[int, int] = (20, 44)
    intensity_range: tuple[float, float] = (0.6, 1.0)
    noise: float = 0.05
    marginals: tuple[float, ...] = (0.3, 0.3, 0.3, 0.3)
    annotate_prob: float = 1.0
    seed: int = 0
    max_tries: int = 30

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.size_range = tuple(self.size_range)
        self.intensity_range = tuple(self.intensity_range)
        self.shapes = tuple(self.shapes)
        self.marginals = tuple(self.marginals)
        lo, hi = self.size_range
        if not 1 <= lo <= hi <= min(self.image_size):
            raise ValueError(f"size_range {self.size_range} must lie within the image {self.image_size}")
        if len(self.shapes) != self.num_classes or len(self.marginals) != self.num_classes:
            raise ValueError("shapes and marginals need one entry per class")
        unknown = set(self.shapes) - set(SHAPE_FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")
        if not all(0.0 <= p <= 1.0 for p in (*self.marginals, self.annotate_prob)):
            raise ValueError("probabilities must lie in [0, 1]")


def _render_shape(kind: str, w: int, h: int, intensity: float) -> np.ndarray:
    """Shape patch of size (h, w) with values in [0, intensity]."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # normalised elliptic radius, 1 at the patch border
    r = np.sqrt(((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2)
    if kind == "blob":
        patch = np.where(r <= 1.0, np.exp(-0.5 * (1.5 * r) ** 2), 0.0)
    elif kind == "rect":
        patch = np.ones((h, w))
    elif kind == "ring":
        thickness = max(0.25, 3.0 / min(w, h))
        patch = ((r <= 1.0) & (r >= 1.0 - thickness)).astype(np.float64)
    elif kind == "cross":
        arm_w, arm_h = max(1, w // 4), max(1, h // 4)
        patch = np.zeros((h, w))
        patch[(h - arm_h) // 2 : (h - arm_h) // 2 + arm_h, :] = 1.0
        patch[:, (w - arm_w) // 2 : (w - arm_w) // 2 + arm_w] = 1.0
    else:
        raise ValueError(f"unknown shape family {kind!r}")
    return intensity * patch


def _support_box(mask: np.ndarray) -> Box | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return Box.from_corners(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_one(config: SynthConfig, index: int, prefix: str = "img") -> SampleRecord:
    rng = sample_rng(config.seed, index)
    h_img, w_img = config.image_size
    k = config.num_classes
    labels = (rng.random(k) < np.asarray(config.marginals)).astype(np.int64)
    canvas = config.noise * np.abs(rng.standard_normal((h_img, w_img)))
    occupied = np.zeros((h_img, w_img), dtype=bool)
    boxes: list[Box | None] = [None] * k
    lo, hi = config.size_range
    for ci in np.flatnonzero(labels):
        for attempt in range(config.max_tries):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1)) if config.shapes[ci] == "rect" else w
            x0 = int(rng.integers(0, w_img - w + 1))
            y0 = int(rng.integers(0, h_img - h + 1))
            intensity = float(rng.uniform(*config.intensity_range))
            # later attempts accept overlap so every positive gets drawn
            if not occupied[y0 : y0 + h, x0 : x0 + w].any() or attempt == config.max_tries - 1:
                break
        patch = _render_shape(config.shapes[ci], w, h, intensity)
        region = canvas[y0 : y0 + h, x0 : x0 + w]
        np.maximum(region, patch, out=region)
        occupied[y0 : y0 + h, x0 : x0 + w] = True
        box = _support_box(patch > 0)
        assert box is not None
        if rng.random() < config.annotate_prob:
            boxes[ci] = Box(box.cx + x0, box.cy + y0, box.w, box.h)
    gray = np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0
    return SampleRecord(f"{prefix}{index:05d}", _as_rgb(gray), labels, boxes)


def generate(config: SynthConfig, n: int, prefix: str = "img") -> list[SampleRecord]:
    """``n`` synthetic samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [generate_one(config, i, prefix) for i in range(n)]


def _as_rgb(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float32)
    return np.broadcast_to(gray, (3,) + gray.shape)


def stack_images(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.stack([np.asarray(r.image, dtype=np.float64) for r in records])


# -- disk I/O ---------------------------------------------------------------------


def save_dir(records: Sequence[SampleRecord], path: str | Path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    k = records[0].num_classes if records else 0
    with open(root / "labels.csv", "w", newline="") as lf, open(root / "boxes.csv", "w", newline="") as bf:
        lw, bw = csv.writer(lf), csv.writer(bf)
        lw.writerow(["image_id"] + [f"c{i}" for i in range(k)])
        bw.writerow(["image_id", "class_id", "cx", "cy", "w", "h"])
        for r in records:
            gray = np.asarray(r.image[0], dtype=np.float64)
            Image.fromarray(np.round(gray * 255.0).astype(np.uint8), mode="L").save(root / "images" / f"{r.image_id}.pgm")
            lw.writerow([r.image_id] + [int(v) for v in r.labels])
            for ci, b in enumerate(r.boxes):
                if b is not None:
                    bw.writerow([r.image_id, ci, repr(b.cx), repr(b.cy), repr(b.w), repr(b.h)])


def _read_image(images_dir: Path, image_id: str) -> np.ndarray:
    for ext in (".pgm", ".png"):
        p = images_dir / f"{image_id}{ext}"
        if p.exists():
            with Image.open(p) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            return _as_rgb(arr)
    raise DataError(f"missing image file for id {image_id!r} in {images_dir}")


def load_dir(path: str | Path) -> list[SampleRecord]:
    root = Path(path)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"{labels_path} not found")
    images_dir = root / "images"
    records: dict[str, SampleRecord] = {}
    with open(labels_path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if not header or header[0] != "image_id":
            raise DataError(f"{labels_path}:1: expected header starting with image_id")
        k = len(header) - 1
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != k + 1:
                raise DataError(f"{labels_path}:{lineno}: expected {k + 1} fields, got {len(row)}")
            image_id = row[0]
            try:
                labels = np.array([int(v) for v in row[1:]], dtype=np.int64)
            except ValueError:
                raise DataError(f"{labels_path}:{lineno}: labels must be integers") from None
            if not np.isin(labels, (0, 1)).all():
                raise DataError(f"{labels_path}:{lineno}: labels must be 0 or 1")
            if image_id in records:
                raise DataError(f"{labels_path}:{lineno}: duplicate image id {image_id!r}")
            if not any((images_dir / f"{image_id}{e}").exists() for e in (".pgm", ".png")):
                raise DataError(f"{labels_path}:{lineno}: unknown image id {image_id!r} (no file in images/)")
            records[image_id] = SampleRecord(image_id, _read_image(images_dir, image_id), labels, [None] * k)

    boxes_path = root / "boxes.csv"
    if boxes_path.exists():
        with open(boxes_path, newline="") as fh:
            rd = csv.reader(fh)
            next(rd, None)
            for lineno, row in enumerate(rd, start=2):
                if not row:
                    continue
                try:
                    image_id, ci, cx, cy, w, h = row
                    ci = int(ci)
                    box = Box(float(cx), float(cy), float(w), float(h))
                except ValueError:
                    raise DataError(f"{boxes_path}:{lineno}: malformed box row {row!r}") from None
                rec = records.get(image_id)
                if rec is None:
                    raise DataError(f"{boxes_path}:{lineno}: unknown image id {image_id!r}")
                if not 0 <= ci < rec.num_classes:
                    raise DataError(f"{boxes_path}:{lineno}: class {ci} out of range")
                if not (box.w > 0 and box.h > 0 and all(map(math.isfinite, (box.cx, box.cy)))):
                    raise DataError(f"{boxes_path}:{lineno}: invalid box {row[2:]}")
                rec.boxes[ci] = box
    return list(records.values())


def positive_counts(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.sum([r.labels for r in records], axis=0)

