"""Classification and localisation measures: AUC, IoU, cDice, T(IoU)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .regions import Box, box_masks

KAPPAS = (0.3, 0.5, 0.6)


def auc(scores, labels) -> float | None:
    """Mann-Whitney U / (P * N) with ties counted as one half.

    ``None`` when the labels contain only one class.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def cdice(saliency: np.ndarray, gt: Box, stride: float = 4.0) -> float | None:
    """Soft Dice, ``2 sum(s*m) / (sum(s) + sum(m))``, against the rasterised box."""
    s = np.asarray(saliency, dtype=np.float64)
    m = box_masks(gt.as_array(), s.shape, stride)
    if m.sum() == 0:
        return None
    return float(2.0 * (s * m).sum() / (s.sum() + m.sum()))


def t_iou(ious: Sequence[float], kappa: float) -> float | None:
    """Fraction of IoUs at or above ``kappa``."""
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        return None
    return float((v >= kappa).mean())


def _mean(values) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass
class Prediction:
    image_id: str
    scores: np.ndarray  # (K,)
    boxes: list[Box | None]
    maps: np.ndarray | None = None  # (K, h, w) in [0, 1], used for cDice


@dataclass
class MetricsReport:
    class_names: list[str]
    auc: list[float | None]
    mean_auc: float | None
    iou: list[float | None]
    mean_iou: float | None
    cdice: list[float | None]
    mean_cdice: float | None
    t_iou: dict[str, list[float | None]] = field(default_factory=dict)
    mean_t_iou: dict[str, float | None] = field(default_factory=dict)
    n_samples: int = 0
    n_annotated: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, label: str = "ours") -> str:
        return format_table({label: self})


def evaluate(
    predictions: Sequence[Prediction],
    dataset: Sequence,
    kappas: Sequence[float] = KAPPAS,
    stride: float = 4.0,
    class_names: Sequence[str] | None = None,
) -> MetricsReport:
    """Metrics over a dataset; ``predictions[i]`` must describe ``dataset[i]``."""
    if len(predictions) != len(dataset):
        raise ValueError(f"{len(predictions)} predictions for {len(dataset)} samples")
    offenders = [(i, p.image_id, r.image_id) for i, (p, r) in enumerate(zip(predictions, dataset)) if p.image_id != r.image_id]
    if offenders:
        shown = ", ".join(f"#{i}: {a!r} vs {b!r}" for i, a, b in offenders[:10])
        raise ValueError(f"prediction ids do not match dataset ids ({len(offenders)} offenders): {shown}")

    k = len(dataset[0].labels)
    names = list(class_names) if class_names is not None else [f"c{i}" for i in range(k)]
    scores = np.stack([p.scores for p in predictions])
    labels = np.stack([r.labels for r in dataset])
    aucs = [auc(scores[:, ci], labels[:, ci]) for ci in range(k)]

    ious: list[list[float]] = [[] for _ in range(k)]
    dices: list[list[float]] = [[] for _ in range(k)]
    for p, r in zip(predictions, dataset):
        for ci, gt in enumerate(r.boxes):
            if gt is None:
                continue
            pb = p.boxes[ci]
            ious[ci].append(iou(pb, gt) if pb is not None else 0.0)
            if p.maps is not None:
                d = cdice(p.maps[ci], gt, stride)
                if d is not None:
                    dices[ci].append(d)

    iou_k = [float(np.mean(v)) if v else None for v in ious]
    dice_k = [float(np.mean(v)) if v else None for v in dices]
    t_table = {f"{kp:g}": [t_iou(v, kp) for v in ious] for kp in kappas}
    return MetricsReport(
        class_names=names,
        auc=aucs,
        mean_auc=_mean(aucs),
        iou=iou_k,
        mean_iou=_mean(iou_k),
        cdice=dice_k,
        mean_cdice=_mean(dice_k),
        t_iou=t_table,
        mean_t_iou={kp: _mean(v) for kp, v in t_table.items()},
        n_samples=len(dataset),
        n_annotated=[len(v) for v in ious],
    )


def _fmt(v: float | None, digits: int = 3) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


TABLE_BLOCKS = ("auc", "iou", "cdice", "t_iou")


def format_table(reports: dict[str, MetricsReport], blocks: Sequence[str] = TABLE_BLOCKS) -> str:
    """Plain-text comparison, one row per method inside each metric block.

    ``blocks`` picks and orders the metric blocks: any of ``auc``, ``iou``,
    ``cdice`` and ``t_iou``.
    """
    unknown = set(blocks) - set(TABLE_BLOCKS)
    if unknown:
        raise ValueError(f"unknown table blocks {sorted(unknown)}")
    first = next(iter(reports.values()))
    names = first.class_names
    label_w = max(8, *(len(m) for m in reports))
    head = f"{'Metric':<10} {'Method':<{label_w}} " + " ".join(f"{n:>7}" for n in names) + f" {'Mean':>7}"
    lines = [head, "-" * len(head)]

    def block(title, getter, digits=3):
        for i, (method, rep) in enumerate(reports.items()):
            row, mean = getter(rep)
            lines.append(
                f"{title if i == 0 else '':<10} {method:<{label_w}} "
                + " ".join(f"{_fmt(v, digits):>7}" for v in row)
                + f" {_fmt(mean, digits):>7}"
            )
        lines.append("-" * len(head))

    for name in blocks:
        if name == "auc":
            block("AUC", lambda r: (r.auc, r.mean_auc))
        elif name == "iou":
            block("IoU", lambda r: (r.iou, r.mean_iou))
        elif name == "cdice":
            block("cDice", lambda r: (r.cdice, r.mean_cdice))
        else:
            for kp in first.t_iou:
                block(f"T(IoU){kp}", lambda r, kp=kp: (r.t_iou[kp], r.mean_t_iou[kp]), digits=2)
    return "\n".join(lines)
