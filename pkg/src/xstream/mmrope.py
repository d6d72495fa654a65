"""Rotary positional embeddings over the shared multimodal timeline.

Video tokens carry 3D positions (time, row, column) on the latent grid;
text and audio hidden states carry 1D temporal positions at (t, 0, 0).
The head dimension is partitioned into three even-sized blocks, one per
axis, and each adjacent (2i, 2i+1) pair inside a block is rotated by
angle pos_axis * base^(-2i/d_block). Positions are real-valued: audio
tokens land between integer chunk times and the rotation handles them
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .interleave import (
    SegmentConfig,
    SegmentPlan,
    TimelinePos,
    audio_token_time,
    text_token_time,
    video_chunk_time,
)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    dim_split: tuple[int, int, int]
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be positive and even, got {self.head_dim}")
        d_t, d_h, d_w = self.dim_split
        for name, d in (("d_t", d_t), ("d_h", d_h), ("d_w", d_w)):
            if d < 0 or d % 2:
                raise ConfigError(f"{name} must be even and non-negative, got {d}")
        if d_t + d_h + d_w != self.head_dim:
            raise ConfigError(
                f"dim_split {self.dim_split} does not sum to head_dim {self.head_dim}")
        if self.base <= 1.0:
            raise ConfigError("rope base must exceed 1")

    @classmethod
    def default_split(cls, head_dim: int, base: float = 10000.0) -> "RopeParams":
        """Half the head dim to time, a quarter each to row and column."""
        d_spatial = (head_dim // 4) & ~1
        return cls(head_dim, (head_dim - 2 * d_spatial, d_spatial, d_spatial), base)

    @classmethod
    def one_d(cls, head_dim: int, base: float = 10000.0) -> "RopeParams":
        return cls(head_dim, (head_dim, 0, 0), base)


@dataclass(frozen=True)
class Pos3D:
    t: float
    h: int = 0
    w: int = 0


def _block_freqs(d: int, base: float) -> np.ndarray:
    if d == 0:
        return np.zeros(0, dtype=np.float64)
    i = np.arange(d // 2, dtype=np.float64)
    return base ** (-2.0 * i / d)


def pair_angles(pos: Pos3D, params: RopeParams) -> np.ndarray:
    """Rotation angle of each (2i, 2i+1) pair, concatenated t|h|w blocks."""
    d_t, d_h, d_w = params.dim_split
    return np.concatenate([
        float(pos.t) * _block_freqs(d_t, params.base),
        float(pos.h) * _block_freqs(d_h, params.base),
        float(pos.w) * _block_freqs(d_w, params.base),
    ])


def angle_table(positions, params: RopeParams) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape (len(positions), head_dim//2), float64."""
    d_t, d_h, d_w = params.dim_split
    f_t = _block_freqs(d_t, params.base)
    f_h = _block_freqs(d_h, params.base)
    f_w = _block_freqs(d_w, params.base)
    ts = np.array([float(p.t) for p in positions], dtype=np.float64)
    hs = np.array([float(p.h) for p in positions], dtype=np.float64)
    ws = np.array([float(p.w) for p in positions], dtype=np.float64)
    ang = np.concatenate([
        ts[:, None] * f_t[None, :],
        hs[:, None] * f_h[None, :],
        ws[:, None] * f_w[None, :],
    ], axis=1)
    return np.cos(ang), np.sin(ang)


def rotate(x: np.ndarray, pos: Pos3D, params: RopeParams) -> np.ndarray:
    """Rotate the trailing head_dim axis of x by the position's angles."""
    x = np.asarray(x)
    if x.shape[-1] != params.head_dim:
        raise ConfigError(
            f"last dim {x.shape[-1]} does not match head_dim {params.head_dim}")
    ang = pair_angles(pos, params)
    cos = np.cos(ang).astype(x.dtype, copy=False)
    sin = np.sin(ang).astype(x.dtype, copy=False)
    out = np.empty_like(x)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def positions_for_plan(plan: SegmentPlan, cfg: SegmentConfig) -> list[Pos3D]:
    """One Pos3D per token of the segment, in slot order.

    Audio and video indices are global (the plan's segment index offsets
    them) so positions keep advancing across segment boundaries.
    """
    s = plan.segment_index
    gw = cfg.grid_width
    out: list[Pos3D] = []
    for slot in plan.slots:
        if slot.modality == "text":
            for j in range(slot.token_count):
                out.append(Pos3D(text_token_time(cfg, s, j).time_index, 0, 0))
        elif slot.modality == "audio":
            base_idx = s * cfg.audio_tokens_per_segment
            for j in range(slot.token_count):
                out.append(Pos3D(audio_token_time(cfg, base_idx + j).time_index, 0, 0))
        else:
            gc = s * cfg.video_chunks_per_segment + slot.chunk_index
            t = video_chunk_time(cfg, gc).time_index
            for i in range(slot.token_count):
                out.append(Pos3D(t, i // gw, i % gw))
    return out


def video_chunk_positions(cfg: SegmentConfig, global_chunk_index: int) -> list[Pos3D]:
    """Grid positions for one latent chunk at its integral timeline slot."""
    t = video_chunk_time(cfg, global_chunk_index).time_index
    gw = cfg.grid_width
    return [Pos3D(t, i // gw, i % gw) for i in range(cfg.tokens_per_video_chunk)]


IDENTITY_TIME = -1.0


def identity_positions(cfg: SegmentConfig) -> list[Pos3D]:
    """Reference-image tokens sit one step before the stream at t = -1."""
    gw = cfg.grid_width
    return [Pos3D(IDENTITY_TIME, i // gw, i % gw)
            for i in range(cfg.tokens_per_video_chunk)]
