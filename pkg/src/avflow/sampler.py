"""ODE integration of the learned velocity field with classifier-free guidance.

Explicit Euler (optionally Heun) on a uniform grid t_k = k/K from Gaussian
noise at t=0 to data at t=1. Task hooks clamp conditioning content into the
state: the identity frame for TI2AV is re-imposed after every step, and TV2A
pins the whole video stream to the provided clean latents so only audio is
integrated (with the audio-to-video attention mask active).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ALL_TASKS,
    AttentionCapture,
    ConditionSet,
    DualStreamDiT,
    TASK_T2AV,
    TASK_TI2AV,
    TASK_TTS,
    TASK_TV2A,
)


class IntegrationError(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite state during integration"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class GuidanceSpec:
    omega: float = 3.0
    steps: int = 50
    task: str = TASK_T2AV
    seed: int = 0
    method: str = "euler"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("step count must be >= 1")
        if not np.isfinite(self.omega):
            raise ValueError("guidance scale must be finite")
        if self.task not in ALL_TASKS:
            raise ValueError(f"unknown task: {self.task}")
        if self.method not in ("euler", "heun"):
            raise ValueError("method must be 'euler' or 'heun'")


def guided_field(model: DualStreamDiT, x_video, x_audio, t, cond: ConditionSet,
                 omega: float, task: str = TASK_T2AV,
                 capture: AttentionCapture | None = None):
    """v_null + omega * (v_cond - v_null), applied to both modal outputs.

    omega == 1 and omega == 0 return the conditional / unconditional field
    bit-exactly instead of going through the extrapolation arithmetic.
    """
    v_cond = model.velocity(x_video, x_audio, t, cond, task, capture=capture)
    if omega == 1.0:
        return v_cond
    v_null = model.velocity(x_video, x_audio, t, cond.null_like(), task)
    if omega == 0.0:
        return v_null

    def mix(c, n):
        if c is None:
            return None
        return n + omega * (c - n)

    return mix(v_cond[0], v_null[0]), mix(v_cond[1], v_null[1])


def integrate(velocity, x0_video, x0_audio, steps: int, method: str = "euler",
              after_step=None):
    """Integrate dx/dt = velocity(x_v, x_a, t) from t=0 to t=1.

    ``velocity`` returns a (video, audio) pair matching the state shapes
    (video side may be None throughout). ``after_step`` may rewrite the state
    (clamping hooks); it runs after every update, including a virtual step -1
    before the first velocity evaluation.
    """
    x_v = None if x0_video is None else np.array(x0_video, dtype=np.float32)
    x_a = np.array(x0_audio, dtype=np.float32)
    if after_step is not None:
        x_v, x_a = after_step(-1, x_v, x_a)
    h = 1.0 / steps
    for k in range(steps):
        t = k / steps
        v_v, v_a = velocity(x_v, x_a, t)
        if method == "heun":
            pred_v = None if x_v is None else x_v + h * v_v
            pred_a = x_a + h * v_a
            w_v, w_a = velocity(pred_v, pred_a, (k + 1) / steps)
            v_v = None if v_v is None else 0.5 * (v_v + w_v)
            v_a = 0.5 * (v_a + w_a)
        if x_v is not None:
            x_v = x_v + h * v_v
        x_a = x_a + h * v_a
        finite = np.isfinite(x_a).all() and (x_v is None or np.isfinite(x_v).all())
        if not finite:
            raise IntegrationError(k)
        if after_step is not None:
            x_v, x_a = after_step(k, x_v, x_a)
    return x_v, x_a


def _task_clamp(task: str, cond: ConditionSet, clean_video):
    """State-rewrite hook for the conditioning tasks."""
    if task == TASK_TV2A:
        if clean_video is None:
            raise ValueError("TV2A sampling needs the clean video latents")
        clean = np.asarray(clean_video, dtype=np.float32)

        def clamp(step, x_v, x_a):
            return clean.copy(), x_a

        return clamp
    if task == TASK_TI2AV:
        identity = np.asarray(cond.image, dtype=np.float32)

        def clamp(step, x_v, x_a):
            if x_v.ndim == 5:
                x_v[:, 0] = identity[:, 0] if identity.ndim == 5 else identity[0]
            else:
                x_v[0] = identity[0]
            return x_v, x_a

        return clamp
    return None


def sample_latents(model: DualStreamDiT, cond: ConditionSet, spec: GuidanceSpec,
                   video_shape, audio_shape, rng: np.random.Generator | None = None,
                   clean_video=None, capture_steps=None, capture_blocks=None):
    """Draw x0 ~ N(0, I) and integrate the guided field for one task.

    Returns (video, audio) latents; video is None for TTS. When
    ``capture_steps``/``capture_blocks`` are given, joint-attention weights of
    the conditional forward pass are collected into the returned dict keyed
    by (step, block).
    """
    rng = rng or np.random.default_rng(spec.seed)
    x0_v = None
    if spec.task != TASK_TTS:
        x0_v = rng.standard_normal(video_shape).astype(np.float32)
    x0_a = rng.standard_normal(audio_shape).astype(np.float32)

    wanted_steps = set(capture_steps or ())
    captured: dict = {}

    def velocity(x_v, x_a, t):
        capture = None
        step = round(t * spec.steps)
        if step in wanted_steps:
            capture = AttentionCapture(capture_blocks or ())
        out = guided_field(model, x_v, x_a, t, cond, spec.omega, spec.task, capture=capture)
        if capture is not None:
            for block, payload in capture.maps.items():
                captured[(step, block)] = payload
        return out

    x_v, x_a = integrate(
        velocity, x0_v, x0_a, spec.steps, method=spec.method,
        after_step=_task_clamp(spec.task, cond, clean_video),
    )
    if capture_steps is None:
        return x_v, x_a
    return x_v, x_a, captured
