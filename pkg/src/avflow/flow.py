"""Flow-matching objective: linear interpolation paths, the regression loss
onto x1 - x0, per-task loss composition, timestep sampling, and the
all-or-nothing condition dropout used for classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ALL_TASKS, ConditionSet, TASK_TTS, TASK_TV2A
from .tensor import Tensor

AUDIO_ONLY_TASKS = frozenset({TASK_TTS, TASK_TV2A})


@dataclass
class FlowSample:
    """One interpolation point: x_t = (1-t)*x0 + t*x1, target = x1 - x0."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray


@dataclass
class LossBreakdown:
    loss_a: float
    loss_v: float
    total: float
    task: str


def _expand_t(t, ndim: int, leading: int) -> np.ndarray:
    """Broadcast scalar or per-sample t over the trailing data axes."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if t.ndim != 1 or t.shape[0] != leading:
        raise ValueError("t must be scalar or one value per batch element")
    return t.reshape((leading,) + (1,) * (ndim - 1))


def sample_path(x0: np.ndarray, x1: np.ndarray, t) -> FlowSample:
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise ValueError(f"x0/x1 shape mismatch: {x0.shape} vs {x1.shape}")
    tv = _expand_t(t, x0.ndim, x0.shape[0] if x0.ndim else 1)
    if np.any(tv < 0.0) or np.any(tv > 1.0):
        raise ValueError("t must lie in [0, 1]")
    x_t = ((1.0 - tv) * x0 + tv * x1).astype(np.float32)
    target = x1 - x0
    return FlowSample(x0=x0, x1=x1, t=np.asarray(t, dtype=np.float64), x_t=x_t, target=target)


def cfm_loss(pred: Tensor, target, frame_mask=None) -> Tensor:
    """Mean squared error against the flow target over unmasked elements.

    ``frame_mask`` is boolean, True = include, broadcastable against the
    prediction (used to exclude the clamped identity frame from the video
    loss).
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise T.ShapeError(f"target shape {target.shape} != pred shape {pred.data.shape}")
    diff = T.sub(pred, Tensor(target))
    sq = T.mul(diff, diff)
    if frame_mask is None:
        return T.mean(sq)
    weights = np.broadcast_to(np.asarray(frame_mask, dtype=bool), pred.data.shape)
    count = int(weights.sum())
    if count == 0:
        raise ValueError("frame_mask excludes every element")
    masked = T.mul(sq, Tensor(weights.astype(pred.data.dtype)))
    return T.scale(T.sum_(masked), 1.0 / count)


def compose_loss(task: str, loss_a: float, loss_v: float) -> LossBreakdown:
    if task not in ALL_TASKS:
        raise ValueError(f"unknown task: {task}")
    total = loss_a if task in AUDIO_ONLY_TASKS else loss_a + loss_v
    return LossBreakdown(loss_a=loss_a, loss_v=loss_v, total=total, task=task)


def condition_dropout(cond: ConditionSet, p: float, rng: np.random.Generator) -> ConditionSet:
    """With probability p replace the whole condition set by the null set."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    if p > 0.0 and rng.random() < p:
        return cond.null_like()
    return cond


def sample_timestep(rng: np.random.Generator) -> float:
    return float(rng.random())
