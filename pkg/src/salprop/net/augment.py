"""Random zoom / translation / rotation / horizontal-flip augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..regions import Box


@dataclass(frozen=True)
class AugmentRanges:
    zoom: tuple[float, float] = (0.0, 0.1)
    translate: float = 50.0  # pixels, each direction
    rotate: float = 10.0  # degrees, each direction
    flip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "zoom", tuple(self.zoom))


@dataclass(frozen=True)
class AffineParams:
    zoom: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    angle: float = 0.0  # degrees
    flip: bool = False


def draw_params(rng: np.random.Generator, ranges: AugmentRanges) -> AffineParams:
    return AffineParams(
        zoom=float(rng.uniform(*ranges.zoom)),
        tx=float(rng.uniform(-ranges.translate, ranges.translate)),
        ty=float(rng.uniform(-ranges.translate, ranges.translate)),
        angle=float(rng.uniform(-ranges.rotate, ranges.rotate)),
        flip=bool(ranges.flip and rng.random() < 0.5),
    )


def _forward_matrix(p: AffineParams) -> np.ndarray:
    """Map from source to destination (x, y) offsets around the image center."""
    a = math.radians(p.angle)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    flip = np.diag([-1.0 if p.flip else 1.0, 1.0])
    return rot @ (np.eye(2) * (1.0 + p.zoom)) @ flip


def apply_affine(image: np.ndarray, p: AffineParams, boxes: list[Box | None] | None = None):
    """Warp ``image`` ``[C, H, W]`` with bilinear resampling and zero fill."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    fwd = _forward_matrix(p)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    shift = np.array([p.tx, p.ty])
    inv = np.linalg.inv(fwd)
    # scipy works in (row, col) = (y, x) order and maps output -> input
    perm = np.array([[0, 1], [1, 0]])
    matrix = perm @ inv @ perm
    offset_xy = center - inv @ (center + shift)
    offset = offset_xy[::-1]
    out = np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=0.0) for ch in image])
    if boxes is None:
        return out
    moved: list[Box | None] = []
    for b in boxes:
        if b is None:
            moved.append(None)
            continue
        x0, y0, x1, y1 = b.corners()
        # corners in index space (pixel centers at integers)
        pts = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]]) - 0.5
        dst = (pts - center) @ fwd.T + center + shift + 0.5
        lo = np.clip(dst.min(axis=0), 0.0, [w, h])
        hi = np.clip(dst.max(axis=0), 0.0, [w, h])
        if np.any(hi - lo < 1.0):
            moved.append(None)
        else:
            moved.append(Box.from_corners(lo[0], lo[1], hi[0], hi[1]))
    return out, moved


def augment(image: np.ndarray, rng: np.random.Generator, ranges: AugmentRanges, boxes: list[Box | None] | None = None):
    """Random affine augmentation; also transforms ``boxes`` when given.

    Boxes pushed entirely off the canvas become ``None``.
    """
    return apply_affine(image, draw_params(rng, ranges), boxes)
