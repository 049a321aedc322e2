"""Class-balanced binary cross entropy for both branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..tensor import Tensor, as_tensor, log_sigmoid


@dataclass(frozen=True)
class ClassWeights:
    beta_p: np.ndarray
    beta_n: np.ndarray


def compute_class_weights(labels) -> ClassWeights:
    """Weights from a dataset (records or an ``[|D|, K]`` label matrix).

    ``beta_p = 1 - P_k / |D|`` and ``beta_n = P_k / |D|``.
    """
    if len(labels) and hasattr(labels[0], "labels"):
        labels = [r.labels for r in labels]
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ValueError("class weights need a non-empty [|D|, K] label matrix")
    frac = y.sum(axis=0) / y.shape[0]
    return ClassWeights(beta_p=1.0 - frac, beta_n=frac)


def balanced_bce(logits: Tensor, y, weights: ClassWeights) -> Tensor:
    """Batch mean of ``-sum_k [bp*y*log s(x) + bn*(1-y)*log(1-s(x))]``.

    ``log(1 - s(x))`` is evaluated as ``log s(-x)``.
    """
    logits = as_tensor(logits)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != logits.shape:
        y = np.broadcast_to(y, logits.shape)
    pos = log_sigmoid(logits) * (weights.beta_p * y)
    neg = log_sigmoid(-logits) * (weights.beta_n * (1.0 - y))
    per_sample = -(pos + neg).sum(axis=-1)
    return per_sample.mean() if per_sample.ndim else per_sample


def loss_cls(y_logit: Tensor, y: Sequence[int] | np.ndarray, weights: ClassWeights) -> Tensor:
    return balanced_bce(y_logit, y, weights)


def loss_rpn(z_logit: Tensor, y: Sequence[int] | np.ndarray, weights: ClassWeights) -> Tensor:
    return balanced_bce(z_logit, y, weights)
