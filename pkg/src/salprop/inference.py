"""From saliency and proposal maps to one box per class.

The procedure: confidence-weighted proposal map, element-wise product with the
saliency map (both min-max normalised per class), thresholding, largest
8-connected component, tightest covering rectangle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .regions import Box, render_rpn_maps
from .tensor import ShapeError, _sigmoid, no_grad, Tensor

KINDS = ("sal", "rpn", "fused", "binary")
VARIANTS = {"sal": "sal", "det": "rpn", "mix": "fused"}
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class SaliencyStack:
    maps: np.ndarray  # (K, H, W)
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown saliency kind {self.kind!r}")
        if self.kind == "binary" and not np.isin(self.maps, (0.0, 1.0)).all():
            raise ValueError("binary stack must contain only 0 and 1")


@dataclass
class DetectionResult:
    boxes: list[Box | None]
    thresholds: np.ndarray
    pixel_counts: np.ndarray


def normalize(maps: np.ndarray) -> np.ndarray:
    """Per-class min-max scaling to [0, 1]; constant maps become zeros."""
    maps = np.asarray(maps, dtype=np.float64)
    single = maps.ndim == 2
    m = maps[None] if single else maps
    lo = m.min(axis=(1, 2), keepdims=True)
    span = m.max(axis=(1, 2), keepdims=True) - lo
    out = np.divide(m - lo, span, out=np.zeros_like(m), where=span > 0)
    return out[0] if single else out


def _fusion_operand(maps: np.ndarray) -> np.ndarray:
    # a constant positive map carries no location information and acts as the identity mask
    out = normalize(maps)
    flat = np.asarray(maps, dtype=np.float64).reshape(maps.shape[0], -1)
    const_pos = (flat.max(axis=1) == flat.min(axis=1)) & (flat.max(axis=1) > 0)
    out[const_pos] = 1.0
    return out


def fuse(sal, rpn) -> SaliencyStack:
    """Element-wise product of the per-class normalised maps."""
    s = sal.maps if isinstance(sal, SaliencyStack) else np.asarray(sal)
    r = rpn.maps if isinstance(rpn, SaliencyStack) else np.asarray(rpn)
    if s.shape != r.shape:
        raise ShapeError(f"fuse: saliency {s.shape} and proposal map {r.shape} differ")
    return SaliencyStack(_fusion_operand(s) * _fusion_operand(r), "fused")


def variant_map(kind: str, sal: np.ndarray, rpn: np.ndarray) -> np.ndarray:
    """The map a detection variant thresholds: ``sal``, ``det`` or ``mix``."""
    if kind == "sal":
        return normalize(sal)
    if kind == "det":
        return normalize(rpn)
    if kind == "mix":
        return fuse(sal, rpn).maps
    raise ValueError(f"unknown variant {kind!r}; expected one of {sorted(VARIANTS)}")


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected component; ties go to the first in raster order."""
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n <= 1:
        return (labels > 0).astype(np.float64)
    sizes = np.bincount(labels.reshape(-1))[1:]
    return (labels == int(np.argmax(sizes)) + 1).astype(np.float64)


def binarize_largest_cc(maps, thresholds) -> SaliencyStack:
    m = maps.maps if isinstance(maps, SaliencyStack) else np.asarray(maps, dtype=np.float64)
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (m.shape[0],))
    out = np.stack([largest_component(m[k] >= thr[k]) for k in range(m.shape[0])])
    return SaliencyStack(out, "binary")


def mask_to_box(mask: np.ndarray, stride: float = 4.0) -> Box | None:
    """Tightest rectangle over the 1-cells, scaled to input pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return Box.from_corners(cols[0] * stride, rows[0] * stride, (cols[-1] + 1) * stride, (rows[-1] + 1) * stride)


def detect(maps: np.ndarray, thresholds, stride: float = 4.0) -> DetectionResult:
    binary = binarize_largest_cc(maps, thresholds).maps
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (binary.shape[0],)).copy()
    return DetectionResult(
        boxes=[mask_to_box(b, stride) for b in binary],
        thresholds=thr,
        pixel_counts=binary.sum(axis=(1, 2)).astype(np.int64),
    )


def select_thresholds(
    maps: Sequence[np.ndarray],
    gt_boxes: Sequence[Sequence[Box | None]],
    grid: Sequence[float] = DEFAULT_GRID,
    stride: float = 4.0,
    default: float = 0.5,
) -> tuple[np.ndarray, list[int]]:
    """Per-class threshold maximising mean IoU over annotated samples.

    ``maps[i]`` is the ``(K, H, W)`` map of sample ``i`` and ``gt_boxes[i]``
    its per-class boxes. Returns the thresholds and the classes that had no
    annotation (those get ``default``). Ties keep the lower threshold.
    """
    from .metrics import iou

    if not maps:
        raise ValueError("threshold selection needs at least one annotated sample")
    k = maps[0].shape[0]
    out = np.full(k, default, dtype=np.float64)
    missing = []
    for ci in range(k):
        samples = [(m[ci], boxes[ci]) for m, boxes in zip(maps, gt_boxes) if boxes[ci] is not None]
        if not samples:
            missing.append(ci)
            continue
        best, best_score = None, -1.0
        for t in sorted(grid):
            scores = []
            for m, gt in samples:
                pred = mask_to_box(largest_component(m >= t), stride)
                scores.append(iou(pred, gt) if pred is not None else 0.0)
            score = float(np.mean(scores))
            if score > best_score:
                best, best_score = t, score
        out[ci] = best
    return out, missing


# -- running the model ----------------------------------------------------------------


@dataclass
class InferenceOutput:
    image_id: str
    scores: np.ndarray  # (K,) probabilities from the classification branch
    sal: np.ndarray  # (K, h, w) raw saliency
    rpn: np.ndarray  # (K, h, w) proposal map


def run_model(model, records: Sequence, batch_size: int = 16) -> list[InferenceOutput]:
    """Saliency maps, proposal maps and class scores for each record."""
    from .data import stack_images

    out: list[InferenceOutput] = []
    map_hw = model.config.map_size
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            x = Tensor(stack_images(chunk))
            sal, y_logit, feats = model.forward_cls(x)
            conf, boxes = model.det_heads(feats)
            conf_p = _sigmoid(conf.data)
            for i, rec in enumerate(chunk):
                rpn = render_rpn_maps(boxes.data[i], conf_p[i], map_hw, stride=4.0)
                out.append(InferenceOutput(rec.image_id, _sigmoid(y_logit.data[i]), sal.data[i], rpn))
    return out


# -- exports ----------------------------------------------------------------------------

DETECTION_FIELDS = ("image_id", "class_id", "cx", "cy", "w", "h", "threshold")


def write_pgm_stack(directory: str | Path, image_id: str, maps: np.ndarray) -> None:
    """One 8-bit PGM per class, values scaled by 255."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for ci, m in enumerate(np.asarray(maps)):
        px = np.round(np.clip(m, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(px, mode="L").save(d / f"{image_id}_c{ci}.pgm")


def read_pgm_stack(directory: str | Path, image_id: str, num_classes: int) -> np.ndarray:
    d = Path(directory)
    maps = []
    for ci in range(num_classes):
        with Image.open(d / f"{image_id}_c{ci}.pgm") as im:
            maps.append(np.asarray(im, dtype=np.float64) / 255.0)
    return np.stack(maps)


def write_detections_csv(path: str | Path, rows: Iterable[tuple[str, DetectionResult]]) -> int:
    """Write one row per present box; returns the number of omitted (empty) detections."""
    empty = 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(DETECTION_FIELDS)
        for image_id, det in rows:
            for ci, b in enumerate(det.boxes):
                if b is None:
                    empty += 1
                    continue
                wr.writerow([image_id, ci, repr(b.cx), repr(b.cy), repr(b.w), repr(b.h), repr(float(det.thresholds[ci]))])
    return empty


def read_detections_csv(path: str | Path, num_classes: int) -> dict[str, list[Box | None]]:
    out: dict[str, list[Box | None]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(header) != DETECTION_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(DETECTION_FIELDS)}")
        for lineno, row in enumerate(rd, start=2):
            try:
                image_id, ci, cx, cy, w, h, _ = row
                boxes = out.setdefault(image_id, [None] * num_classes)
                boxes[int(ci)] = Box(float(cx), float(cy), float(w), float(h))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed detection row {row!r}") from None
    return out
