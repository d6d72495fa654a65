"""Diffusion machinery for chunk-wise autoregressive denoising.

Covers the cosine noise schedule, v-prediction targets and loss, independent
per-chunk noise assignment for diffusion-forcing training, deterministic DDIM
updates, and the staggered pyramid schedule that denoises a window of chunks
in parallel with one forward pass per round.

Conventions: noise level k runs 0 (clean) to N (pure noise); alpha_bar[k] is
the cumulative signal fraction with alpha_bar[0] = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StepError

DEFAULT_STEPS = 25
COSINE_S = 0.008
ALPHA_BAR_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar[0..N], strictly decreasing."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if self.steps < 1:
            raise ConfigError("schedule needs at least 1 step")
        if ab.shape != (self.steps + 1,):
            raise ConfigError(f"alpha_bar must have {self.steps + 1} entries")
        if ab[0] != 1.0:
            raise ConfigError("alpha_bar[0] must be exactly 1")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ConfigError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")

    def signal(self, k: int) -> float:
        return math.sqrt(self.alpha_bar[k])

    def noise(self, k: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[k])


def cosine_schedule(steps: int = DEFAULT_STEPS, s: float = COSINE_S,
                    floor: float = ALPHA_BAR_FLOOR) -> NoiseSchedule:
    """Squared-cosine alpha_bar, normalized so alpha_bar[0] == 1.

    The terminal value is clipped up to `floor` so the pure-noise endpoint
    keeps a nonzero signal coefficient.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    k = np.arange(steps + 1, dtype=np.float64)
    f = np.cos((k / steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
    ab = f / f[0]
    ab = np.maximum(ab, floor)
    ab[0] = 1.0
    return NoiseSchedule(steps, ab)


def _check_level(k: int, sched: NoiseSchedule) -> int:
    k = int(k)
    if not 0 <= k <= sched.steps:
        raise StepError(f"noise level {k} outside [0, {sched.steps}]")
    return k


def _check_pair(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add_noise(v: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """v_k = sqrt(ab_k) * v + sqrt(1 - ab_k) * eps."""
    k = _check_level(k, sched)
    _check_pair(v, eps, "add_noise")
    if k == 0:
        return v.copy()
    return (sched.signal(k) * v + sched.noise(k) * eps).astype(v.dtype, copy=False)


def velocity_target(v: np.ndarray, eps: np.ndarray, k: int,
                    sched: NoiseSchedule) -> np.ndarray:
    """vel = sqrt(ab_k) * eps - sqrt(1 - ab_k) * v."""
    k = _check_level(k, sched)
    _check_pair(v, eps, "velocity_target")
    return (sched.signal(k) * eps - sched.noise(k) * v).astype(v.dtype, copy=False)


def vpred_loss(pred_vel: np.ndarray, target_vel: np.ndarray) -> float:
    """Mean squared error over all elements."""
    _check_pair(pred_vel, target_vel, "vpred_loss")
    diff = pred_vel.astype(np.float64) - target_vel.astype(np.float64)
    return float(np.mean(diff * diff))


def x0_eps_from_velocity(v_k: np.ndarray, vel: np.ndarray, k: int,
                         sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Invert the v-parameterization at level k.

    x0 = sqrt(ab_k) * v_k - sqrt(1 - ab_k) * vel
    eps = sqrt(1 - ab_k) * v_k + sqrt(ab_k) * vel
    and sqrt(ab_k) * x0 + sqrt(1 - ab_k) * eps reconstructs v_k.
    """
    k = _check_level(k, sched)
    _check_pair(v_k, vel, "x0_eps_from_velocity")
    a, b = sched.signal(k), sched.noise(k)
    x0 = a * v_k - b * vel
    eps = b * v_k + a * vel
    return x0.astype(v_k.dtype, copy=False), eps.astype(v_k.dtype, copy=False)


def ddim_step(v_k: np.ndarray, pred_vel: np.ndarray, k: int, k_next: int,
              sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from level k down to k_next (eta = 0)."""
    k = _check_level(k, sched)
    k_next_i = int(k_next)
    if not 0 <= k_next_i < k:
        raise StepError(f"ddim_step needs 0 <= k_next < k, got k={k} k_next={k_next}")
    _check_pair(v_k, pred_vel, "ddim_step")
    x0, eps = x0_eps_from_velocity(v_k, pred_vel, k, sched)
    out = sched.signal(k_next_i) * x0 + sched.noise(k_next_i) * eps
    return out.astype(v_k.dtype, copy=False)


def chunk_noise(seed: int, chunk_index: int, shape: tuple[int, ...],
                dtype=np.float32) -> np.ndarray:
    """Initial Gaussian noise for one chunk, a pure function of (seed, index).

    Counter-based generator keyed on both values, so regeneration order and
    pipeline timing cannot change the draw.
    """
    bits = np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF,
                                          chunk_index & 0xFFFFFFFFFFFFFFFF],
                                         dtype=np.uint64))
    return np.random.Generator(bits).standard_normal(shape).astype(dtype)


def sample_chunk_noise_levels(chunks: int, steps: int,
                              rng: np.random.Generator) -> np.ndarray:
    """Independent uniform draw from {1..N} per chunk (diffusion forcing)."""
    if chunks < 1:
        raise ConfigError("chunks must be >= 1")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    return rng.integers(1, steps + 1, size=chunks, dtype=np.int64)


def teacher_forcing_levels(chunks: int, steps: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Ablation: clean history, a single noised final chunk."""
    if chunks < 1:
        raise ConfigError("chunks must be >= 1")
    levels = np.zeros(chunks, dtype=np.int64)
    levels[-1] = int(rng.integers(1, steps + 1))
    return levels


@dataclass(frozen=True)
class ScheduleMatrix:
    """Noise level of every chunk entering every denoising round.

    entry[r][c] = clamp(N - (r - c), 0, N). Chunk c is actively denoised in
    rounds c .. c+N-1 (one DDIM step per round); before that it idles at N,
    after that it is finalized at 0.
    """

    chunks: int
    steps: int
    entries: np.ndarray

    @property
    def rounds(self) -> int:
        return self.entries.shape[0]

    def level(self, round_index: int, chunk: int) -> int:
        return int(self.entries[round_index, chunk])

    def level_after(self, round_index: int, chunk: int) -> int:
        """Level the chunk holds once this round's step completes."""
        if round_index + 1 < self.rounds:
            return int(self.entries[round_index + 1, chunk])
        return 0

    def is_active(self, round_index: int, chunk: int) -> bool:
        return chunk <= round_index <= chunk + self.steps - 1

    def active_chunks(self, round_index: int) -> list[int]:
        return [c for c in range(self.chunks) if self.is_active(round_index, c)]

    def finalize_round(self, chunk: int) -> int:
        """Round whose step brings the chunk to level 0."""
        return chunk + self.steps - 1


def build_pyramid_matrix(chunks: int, steps: int) -> ScheduleMatrix:
    if chunks < 1 or steps < 1:
        raise ConfigError("chunks and steps must be >= 1")
    rounds = chunks + steps - 1
    r = np.arange(rounds)[:, None]
    c = np.arange(chunks)[None, :]
    entries = np.clip(steps - (r - c), 0, steps).astype(np.int64)
    return ScheduleMatrix(chunks, steps, entries)


def pass_counts(chunks: int, steps: int) -> tuple[int, int]:
    """(naive sequential forward passes, pyramid forward passes)."""
    if chunks < 1 or steps < 1:
        raise ConfigError("chunks and steps must be >= 1")
    return chunks * steps, chunks + steps - 1
