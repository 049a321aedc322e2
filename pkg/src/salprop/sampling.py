"""Gumbel noise, Gumbel-Softmax relaxation and straight-through sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op, softmax

UNIFORM_CLAMP = 1e-10


@dataclass(frozen=True)
class TemperatureSchedule:
    """Geometric annealing from ``tau_start`` to ``tau_end`` over ``total_steps``."""

    tau_start: float = 1.0
    tau_end: float = 0.001
    total_steps: int = 1

    def __post_init__(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError(f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    def tau_at(self, step: int) -> float:
        return tau_at(self, step)


def tau_at(schedule: TemperatureSchedule, step: int) -> float:
    # endpoints returned verbatim so they are exact
    if step <= 0:
        return schedule.tau_start
    if step >= schedule.total_steps:
        return schedule.tau_end
    frac = step / schedule.total_steps
    return schedule.tau_start * (schedule.tau_end / schedule.tau_start) ** frac


def gumbel_noise(rng: np.random.Generator, n, *, uniform: np.ndarray | None = None) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log u)``; ``n`` may be an int or a shape."""
    if uniform is None:
        if isinstance(n, int) and n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        uniform = rng.random(n)
    u = np.clip(np.asarray(uniform, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(
    logits: Tensor,
    tau: float,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
) -> Tensor:
    """``softmax((logits + g) / tau)`` over the last axis.

    Pass ``noise`` to freeze the Gumbel draw (gradient checks, replays).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs either rng or noise")
        noise = gumbel_noise(rng, logits.shape)
    return softmax((logits + noise) * (1.0 / tau), axis=-1)


@dataclass
class CategoricalSample:
    soft: Tensor
    hard: Tensor
    index: np.ndarray | int


def straight_through(soft: Tensor) -> CategoricalSample:
    """One-hot at argmax of ``soft`` forward; identity gradient backward.

    Ties resolve to the lowest index (``np.argmax`` semantics).
    """
    idx = np.argmax(soft.data, axis=-1)
    hard = np.zeros_like(soft.data)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    out = custom_op(hard, (soft,), lambda g: (g,))
    index = int(idx) if np.ndim(idx) == 0 else idx
    return CategoricalSample(soft=soft, hard=out, index=index)


def st_gumbel_softmax(
    logits: Tensor,
    tau: float,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
) -> CategoricalSample:
    return straight_through(gumbel_softmax(logits, tau, rng, noise=noise))


def worker_rng(root_seed: int, worker: int) -> np.random.Generator:
    """Independent generator for one worker, derived from a root seed."""
    return np.random.default_rng(np.random.SeedSequence(root_seed, spawn_key=(worker,)))


EULER_GAMMA = 0.5772156649015329
