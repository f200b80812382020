"""Anisotropic rotary position embedding over (t, h, w) axes.

Head channels are split into three blocks, one per axis, and each pair of
channels is rotated by angle ``p * base**(-2i/d_axis)``. Video tokens carry
their real grid position; audio tokens are pinned to one fixed spatial anchor
and only move along a (scaled) time axis, so their spatial rotation is
identical for every token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, rope_rotate


@dataclass(frozen=True)
class PositionTriple:
    t: int
    h: int
    w: int

    def __post_init__(self):
        if self.t < 0 or self.h < 0 or self.w < 0:
            raise ValueError("position indices must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.h, self.w], dtype=np.float64)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    split: tuple[int, int, int]
    base: float = 10000.0
    audio_anchor: tuple[int, int] = (0, 0)
    audio_time_scale: float = 1.0

    def __post_init__(self):
        if sum(self.split) != self.head_dim:
            raise ValueError("axis split must sum to head_dim")
        if any(d < 0 or d % 2 != 0 for d in self.split):
            raise ValueError("axis split channels must be even and non-negative")
        if self.base <= 1.0:
            raise ValueError("base frequency must be > 1")


def default_split(head_dim: int) -> tuple[int, int, int]:
    """Half the channels on time, a quarter each on height and width."""
    if head_dim % 2 != 0:
        raise ValueError("head_dim must be even")
    spatial = 2 * (head_dim // 8)
    return (head_dim - 2 * spatial, spatial, spatial)


def _axis_angles(p: np.ndarray, d: int, base: float) -> np.ndarray:
    """theta_i = p * base**(-2i/d) for i in 0..d/2-1; p may be a vector."""
    if d == 0:
        return np.zeros(p.shape + (0,))
    freqs = base ** (-2.0 * np.arange(d // 2) / d)
    return p[..., None] * freqs


def angle_table(positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Angles for an (n, 3) float position array -> (n, head_dim/2).

    Layout is [t-block | h-block | w-block] matching the channel split.
    """
    positions = np.asarray(positions, dtype=np.float64)
    dt, dh, dw = cfg.split
    blocks = [
        _axis_angles(positions[..., 0], dt, cfg.base),
        _axis_angles(positions[..., 1], dh, cfg.base),
        _axis_angles(positions[..., 2], dw, cfg.base),
    ]
    return np.concatenate(blocks, axis=-1)


def rope_angles(pos: PositionTriple, cfg: RopeConfig) -> np.ndarray:
    """Angle vector (head_dim/2,) for a single position triple."""
    return angle_table(pos.as_array()[None, :], cfg)[0]


def audio_angle_positions(n_frames: int, cfg: RopeConfig) -> np.ndarray:
    """Float (n, 3) positions for audio tokens: scaled time, fixed anchor."""
    h0, w0 = cfg.audio_anchor
    pos = np.zeros((n_frames, 3))
    pos[:, 0] = np.arange(n_frames) * cfg.audio_time_scale
    pos[:, 1] = h0
    pos[:, 2] = w0
    return pos


class RotationTable:
    """Precomputed cos/sin table for one token sequence."""

    def __init__(self, angles: np.ndarray, dtype=np.float32):
        self.cos = np.cos(angles).astype(dtype)
        self.sin = np.sin(angles).astype(dtype)

    def apply(self, x: Tensor) -> Tensor:
        return rope_rotate(x, self.cos.astype(x.data.dtype), self.sin.astype(x.data.dtype))


def apply_rope(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate channel pairs of ``x`` (..., n, head_dim) by ``angles`` (n, head_dim/2)."""
    angles = np.asarray(angles)
    cos = np.cos(angles).astype(x.data.dtype)
    sin = np.sin(angles).astype(x.data.dtype)
    return rope_rotate(x, cos, sin)
