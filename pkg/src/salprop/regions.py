"""Anchors, RoiAlign, box refinement, differentiable crops and the proposal map."""

from __future__ import annotations

import collections
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, clip, custom_op, exp, stack

# Counts of clamping events seen by the kernels below ("degenerate_box",
# "zero_confidence"). Informational only.
DIAGNOSTICS: collections.Counter = collections.Counter()

MAX_LOG_SCALE = 4.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in input pixels: center, width, height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> Box:
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @classmethod
    def from_array(cls, a) -> Box:
        return cls(*np.asarray(a, dtype=np.float64).reshape(4))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def clamp(self, image_size: tuple[int, int]) -> Box:
        """Clip to the image lattice, keeping at least one pixel per side."""
        h_img, w_img = image_size
        x0, y0, x1, y1 = self.corners()
        x0, x1 = _clamp_span(x0, x1, w_img)
        y0, y1 = _clamp_span(y0, y1, h_img)
        return Box.from_corners(x0, y0, x1, y1)


def _clamp_span(a: float, b: float, limit: float) -> tuple[float, float]:
    a = min(max(a, 0.0), limit - 1.0)
    b = min(max(b, 1.0), float(limit))
    if b - a < 1.0:
        DIAGNOSTICS["degenerate_box"] += 1
        b = a + 1.0
    return a, b


# -- anchors -------------------------------------------------------------------


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (N, 4) as cx, cy, w, h
    sizes: tuple[int, ...]
    strides: tuple[int, ...]
    ratios: tuple[float, ...]
    image_size: tuple[int, int]
    scale_index: np.ndarray  # (N,) index into sizes

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def anchors(self) -> list[Box]:
        return [Box.from_array(b) for b in self.boxes]


def _axis_positions(length: int, extent: float, stride: int) -> np.ndarray:
    if extent > length:
        return np.empty(0)
    n = int((length - extent) // stride) + 1
    # center any leftover margin so the grid is symmetric
    offset = ((length - extent) - (n - 1) * stride) / 2.0
    return offset + stride * np.arange(n) + extent / 2.0


def expected_anchor_count(
    image_size: tuple[int, int], sizes: Sequence[int], strides: Sequence[int], ratios: Sequence[float] = (1.0,)
) -> int:
    h, w = image_size
    total = 0
    for size, stride in zip(sizes, strides):
        for r in ratios:
            aw, ah = size * math.sqrt(r), size / math.sqrt(r)
            if aw <= w and ah <= h:
                total += (int((w - aw) // stride) + 1) * (int((h - ah) // stride) + 1)
    return total


def generate_anchors(
    image_size: tuple[int, int],
    sizes: Sequence[int],
    strides: Sequence[int],
    ratios: Sequence[float] = (1.0,),
) -> AnchorSet:
    """Tile square-ish anchors fully inside the image, ordered by scale then row-major."""
    if len(sizes) != len(strides):
        raise ValueError(f"sizes {list(sizes)} and strides {list(strides)} differ in length")
    h, w = image_size
    boxes, scale_idx = [], []
    for si, (size, stride) in enumerate(zip(sizes, strides)):
        if stride <= 0:
            raise ValueError(f"stride must be positive, got {stride}")
        count = 0
        for r in ratios:
            aw, ah = size * math.sqrt(r), size / math.sqrt(r)
            xs = _axis_positions(w, aw, stride)
            ys = _axis_positions(h, ah, stride)
            for cy in ys:
                for cx in xs:
                    boxes.append((cx, cy, aw, ah))
            count += len(xs) * len(ys)
        if count == 0:
            raise ValueError(
                f"anchor size {size} with stride {stride} yields no anchors inside a {h}x{w} image"
            )
        scale_idx.extend([si] * count)
    return AnchorSet(
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        sizes=tuple(sizes),
        strides=tuple(strides),
        ratios=tuple(ratios),
        image_size=(h, w),
        scale_index=np.asarray(scale_idx, dtype=np.int64),
    )


# -- bilinear sampling -----------------------------------------------------------


def _corner_indices(p: np.ndarray, n: int):
    inside = (p >= 0) & (p <= n - 1)
    pc = np.clip(p, 0, n - 1)
    if n == 1:
        i0 = np.zeros(p.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(pc), np.zeros(p.shape, dtype=bool)
    i0 = np.minimum(np.floor(pc).astype(np.int64), n - 2)
    return i0, i0 + 1, pc - i0, inside


def bilinear_grid(image: Tensor, py, px) -> Tensor:
    """Sample ``image`` on separable grids of points.

    ``image`` is ``[B, C, H, W]``; ``py`` is ``[B, M, h]`` and ``px`` is
    ``[B, M, w]`` in array-index coordinates (cell centers at integers). The
    result is ``[B, M, C, h, w]``. Points outside the lattice are clamped to
    the border, where the coordinate gradient is zero.
    """
    py, px = as_tensor(py), as_tensor(px)
    img = image.data
    b, c, hh, ww = img.shape
    m = max(py.shape[1], px.shape[1])
    pyd = np.broadcast_to(py.data, (b, m, py.shape[2]))
    pxd = np.broadcast_to(px.data, (b, m, px.shape[2]))
    y0, y1, wy, in_y = _corner_indices(pyd, hh)
    x0, x1, wx, in_x = _corner_indices(pxd, ww)

    bi = np.arange(b).reshape(b, 1, 1, 1)
    Y0, Y1 = y0[:, :, :, None], y1[:, :, :, None]
    X0, X1 = x0[:, :, None, :], x1[:, :, None, :]
    # advanced indices around a slice put the channel axis last
    v00 = img[bi, :, Y0, X0]
    v01 = img[bi, :, Y0, X1]
    v10 = img[bi, :, Y1, X0]
    v11 = img[bi, :, Y1, X1]
    WY = wy[:, :, :, None, None]
    WX = wx[:, :, None, :, None]
    top = v00 + WX * (v01 - v00)
    bot = v10 + WX * (v11 - v10)
    out = (top + WY * (bot - top)).transpose(0, 1, 4, 2, 3)

    def back(g):
        gl = g.transpose(0, 1, 3, 4, 2)  # B, M, h, w, C
        gimg = None
        if image.requires_grad:
            size = b * c * hh * ww
            base = (bi[..., None] * c + np.arange(c)) * hh  # (B, 1, 1, 1, C)
            acc = np.zeros(size)
            for Y, X, wgt in (
                (Y0, X0, (1 - WY) * (1 - WX)),
                (Y0, X1, (1 - WY) * WX),
                (Y1, X0, WY * (1 - WX)),
                (Y1, X1, WY * WX),
            ):
                flat = (base + Y[..., None]) * ww + X[..., None]
                acc += np.bincount(flat.reshape(-1), weights=(gl * wgt).reshape(-1), minlength=size)
            gimg = acc.reshape(b, c, hh, ww)
        gpy = gpx = None
        if py.requires_grad:
            d = (gl * (bot - top)).sum(axis=(3, 4)) * in_y
            gpy = _reduce_to(d, py.shape)
        if px.requires_grad:
            dx = (1 - WY) * (v01 - v00) + WY * (v11 - v10)
            d = (gl * dx).sum(axis=(2, 4)) * in_x
            gpx = _reduce_to(d, px.shape)
        return gimg, gpy, gpx

    return custom_op(out, (image, py, px), back)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _grid_coords(boxes, n_out: int, lattice: int, scale: float, axis: int):
    """Sample coordinates along one axis for boxes ``[..., 4]``.

    Sample ``j`` sits at the center of output cell ``j``; the continuous
    coordinate is mapped to array indices as ``x * scale - 0.5``.
    """
    centers = (np.arange(n_out) + 0.5) / n_out - 0.5
    if isinstance(boxes, Tensor):
        c = boxes[..., axis : axis + 1]
        s = boxes[..., axis + 2 : axis + 3]
        return (c + s * centers) * scale - 0.5
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., axis : axis + 1] + boxes[..., axis + 2 : axis + 3] * centers) * scale - 0.5


def _min_size_boxes(boxes: np.ndarray, min_size: float) -> np.ndarray:
    small = boxes[..., 2:] < min_size
    if small.any():
        DIAGNOSTICS["degenerate_box"] += int(small.sum())
        boxes = boxes.copy()
        boxes[..., 2:] = np.maximum(boxes[..., 2:], min_size)
    return boxes


def roi_align(
    features: Tensor,
    boxes,
    out_size: tuple[int, int] = (3, 3),
    spatial_scale: float = 0.25,
) -> Tensor:
    """Bilinear RoiAlign with one sample at each output-cell center.

    ``features`` is ``[Q, h, w]`` with a single :class:`Box`, or
    ``[B, Q, h, w]`` with an ``(N, 4)`` array of boxes giving ``[B, N, Q, h_r, w_r]``.
    Boxes are in input pixels; ``spatial_scale`` maps them onto the feature map.
    """
    single = isinstance(boxes, Box)
    arr = boxes.as_array()[None] if single else np.asarray(boxes, dtype=np.float64)
    arr = _min_size_boxes(arr, 1.0)
    feats = features.reshape((1,) + features.shape) if features.ndim == 3 else features
    hr, wr = out_size
    _, _, fh, fw = feats.shape
    py = _grid_coords(arr, hr, fh, spatial_scale, axis=1)[None]
    px = _grid_coords(arr, wr, fw, spatial_scale, axis=0)[None]
    out = bilinear_grid(feats, py, px)
    if single:
        return out.reshape(out.shape[2:])
    return out if features.ndim == 4 else out.reshape(out.shape[1:])


def crop_resize(image: Tensor, box, out: tuple[int, int] = (64, 64)) -> Tensor:
    """Bilinearly resample the region under ``box`` to ``out``.

    ``image`` is ``[C, H, W]`` with a single box (Box, array or Tensor of 4), or
    ``[B, C, H, W]`` with boxes ``[B, M, 4]`` giving ``[B, M, C, H_f, W_f]``.
    Differentiable with respect to the image and, for Tensor boxes, the box.
    """
    hf, wf = out
    if isinstance(box, Box):
        box = box.as_array()
    if not isinstance(box, Tensor):
        box = np.asarray(box, dtype=np.float64)
        box = _min_size_boxes(box, 1.0)
    else:
        small = box.data[..., 2:] < 1.0
        if small.any():
            DIAGNOSTICS["degenerate_box"] += int(small.sum())
    unbatched = image.ndim == 3
    if unbatched:
        image = image.reshape((1,) + image.shape)
        box = box.reshape(1, 1, 4)
    py = _grid_coords(box, hf, image.shape[2], 1.0, axis=1)
    px = _grid_coords(box, wf, image.shape[3], 1.0, axis=0)
    res = bilinear_grid(image, py, px)
    return res.reshape(res.shape[2:]) if unbatched else res


# -- box refinement ----------------------------------------------------------------


def apply_deltas(anchor: Box, deltas: Sequence[float], image_size: tuple[int, int] | None = None) -> Box:
    """Refine an anchor with (dx, dy, dw, dh) deltas, then clamp to the image."""
    dx, dy, dw, dh = (float(d) for d in deltas)
    dw = min(max(dw, -MAX_LOG_SCALE), MAX_LOG_SCALE)
    dh = min(max(dh, -MAX_LOG_SCALE), MAX_LOG_SCALE)
    box = Box(anchor.cx + dx * anchor.w, anchor.cy + dy * anchor.h, anchor.w * math.exp(dw), anchor.h * math.exp(dh))
    return box.clamp(image_size) if image_size is not None else box


def apply_deltas_tensor(anchors: np.ndarray, deltas: Tensor, image_size: tuple[int, int]) -> Tensor:
    """Vectorised :func:`apply_deltas`: anchors ``(N, 4)``, deltas ``[..., N, 4]``."""
    a = np.asarray(anchors, dtype=np.float64)
    h_img, w_img = image_size
    cx = deltas[..., 0] * a[:, 2] + a[:, 0]
    cy = deltas[..., 1] * a[:, 3] + a[:, 1]
    w = exp(clip(deltas[..., 2], -MAX_LOG_SCALE, MAX_LOG_SCALE)) * a[:, 2]
    h = exp(clip(deltas[..., 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)) * a[:, 3]
    x0 = clip(cx - w * 0.5, 0.0, w_img - 1.0)
    x1 = clip(cx + w * 0.5, 1.0, float(w_img))
    y0 = clip(cy - h * 0.5, 0.0, h_img - 1.0)
    y1 = clip(cy + h * 0.5, 1.0, float(h_img))
    bw = clip(x1 - x0, 1.0, float(w_img))
    bh = clip(y1 - y0, 1.0, float(h_img))
    return stack([x0 + bw * 0.5, y0 + bh * 0.5, bw, bh], axis=-1)


# -- proposal map -------------------------------------------------------------------


@dataclass(frozen=True)
class RefinedProposal:
    anchor_index: int
    class_index: int
    confidence: float
    box: Box


def box_masks(boxes: np.ndarray, map_hw: tuple[int, int], stride: float = 4.0) -> np.ndarray:
    """Rasterise boxes ``(..., 4)`` at map resolution, ``(..., H, W)`` of {0, 1}.

    A map cell belongs to the box when its center, in input pixels, lies in
    the half-open box ``[x0, x1) x [y0, y1)``.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    hm, wm = map_hw
    ys = (np.arange(hm) + 0.5) * stride
    xs = (np.arange(wm) + 0.5) * stride
    x0 = boxes[..., 0:1] - boxes[..., 2:3] / 2
    x1 = boxes[..., 0:1] + boxes[..., 2:3] / 2
    y0 = boxes[..., 1:2] - boxes[..., 3:4] / 2
    y1 = boxes[..., 1:2] + boxes[..., 3:4] / 2
    rows = (ys >= y0) & (ys < y1)
    cols = (xs >= x0) & (xs < x1)
    return (rows[..., :, None] & cols[..., None, :]).astype(np.float64)


def render_rpn_maps(boxes: np.ndarray, confidences: np.ndarray, map_hw: tuple[int, int], stride: float = 4.0) -> np.ndarray:
    """Confidence-weighted mean of proposal indicators.

    ``boxes`` is ``(K, N, 4)``, ``confidences`` ``(K, N)``; returns ``(K, H, W)``.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    hm, wm = map_hw
    ys = (np.arange(hm) + 0.5) * stride
    xs = (np.arange(wm) + 0.5) * stride
    half_w, half_h = boxes[..., 2:3] / 2, boxes[..., 3:4] / 2
    rows = ((ys >= boxes[..., 1:2] - half_h) & (ys < boxes[..., 1:2] + half_h)).astype(np.float64)
    cols = ((xs >= boxes[..., 0:1] - half_w) & (xs < boxes[..., 0:1] + half_w)).astype(np.float64)
    acc = np.einsum("kn,kni,knj->kij", conf, rows, cols, optimize=True)
    total = conf.sum(axis=1)
    out = np.zeros_like(acc)
    ok = total > 0
    if not ok.all():
        DIAGNOSTICS["zero_confidence"] += int((~ok).sum())
    out[ok] = acc[ok] / total[ok, None, None]
    return np.clip(out, 0.0, 1.0)


def render_rpn_map(proposals: Iterable[RefinedProposal], map_size: tuple[int, int, int], stride: float = 4.0) -> np.ndarray:
    """List-of-proposals front end to :func:`render_rpn_maps`."""
    k, hm, wm = map_size
    per_class: list[list[RefinedProposal]] = [[] for _ in range(k)]
    for p in proposals:
        per_class[p.class_index].append(p)
    out = np.zeros((k, hm, wm))
    for ci, props in enumerate(per_class):
        if not props:
            raise ValueError(f"class {ci} has no proposals")
        boxes = np.stack([p.box.as_array() for p in props])[None]
        conf = np.array([[p.confidence for p in props]])
        out[ci] = render_rpn_maps(boxes, conf, (hm, wm), stride)[0]
    return out


# -- CSV ------------------------------------------------------------------------------

PROPOSAL_FIELDS = ("image_id", "class_id", "cx", "cy", "w", "h", "confidence")


def write_proposals_csv(path: str | Path, rows: Iterable[tuple[str, RefinedProposal]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PROPOSAL_FIELDS)
        for image_id, p in rows:
            b = p.box
            wr.writerow([image_id, p.class_index, repr(b.cx), repr(b.cy), repr(b.w), repr(b.h), repr(p.confidence)])


def read_proposals_csv(path: str | Path) -> list[tuple[str, RefinedProposal]]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(header) != PROPOSAL_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(PROPOSAL_FIELDS)}")
        for lineno, row in enumerate(rd, start=2):
            try:
                image_id, k, cx, cy, w, h, conf = row
                out.append((image_id, RefinedProposal(-1, int(k), float(conf), Box(float(cx), float(cy), float(w), float(h)))))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed proposal row {row!r}") from None
    return out
