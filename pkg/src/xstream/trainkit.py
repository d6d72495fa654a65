"""Synthetic latent movies and the toy training loop for the video actor.

Scenes are moving 2D Gaussian blobs rendered straight onto the latent grid,
with per-segment conditioning vectors steering the blob's velocity. Ground
truth is exact and cheap, which is what makes autoregressive drift measurable:
roll the trained model out for a horizon and compare against the trajectory
the scene would actually take.

Training optimizes the velocity-prediction loss with plain Adam. Every source
of randomness in a step is drawn from a counter-based generator keyed by
(seed, step), so runs are bit-reproducible and a resumed run replays the
exact batch sequence of an uninterrupted one.
"""

from __future__ import annotations

import contextlib
import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import dforce
from . import numcore as nc
from .dforce import NoiseSchedule
from .errors import ConfigError, ShapeError, StateError
from .interleave import SegmentConfig
from .numcore import load_xtar, save_xtar

DIFFUSION = "diffusion"
TEACHER = "teacher"
_MODES = (DIFFUSION, TEACHER)

DIVERGENCE_LIMIT = 1e3


@dataclass(frozen=True)
class DataConfig:
    """Dataset shape, loadable from the data.* config namespace."""

    scenes: int = 16
    segments_per_scene: int = 2
    scene_seed: int = 0
    speed: float = 0.6        # fraction of remaining target distance per chunk
    blob_sigma: float = 1.5   # blob radius in grid cells

    def __post_init__(self):
        if self.scenes < 1:
            raise ConfigError("data.scenes must be >= 1")
        if self.segments_per_scene < 1:
            raise ConfigError("data.segments_per_scene must be >= 1")
        if self.speed <= 0 or self.blob_sigma <= 0:
            raise ConfigError("data.speed and data.blob_sigma must be positive")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown data config key {key!r}")
            try:
                kwargs[key] = float(raw) if key in ("speed", "blob_sigma") else int(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        return cls(**kwargs)


class SyntheticScene:
    """A deterministic latent movie of one blob chasing targets on the grid.

    Each video chunk is a single latent frame: per-channel amplitudes times a
    Gaussian bump at the blob's position. Every segment's conditioning block
    picks a target point on a circle around the grid center, and the blob
    covers a fixed fraction of the remaining distance each chunk. The pull
    toward the target makes the dynamics contractive: a position error decays
    geometrically instead of compounding, so long rollouts stay anchored near
    the identity frame the way a pinned reference anchors appearance.
    Amplitudes stay below 3, bounding every latent in [-3, 3].
    """

    def __init__(self, seed: int, seg: SegmentConfig, cond_dim: int,
                 segments: int, *, speed: float = 0.6, blob_sigma: float = 1.5):
        if segments < 1:
            raise ConfigError("a scene needs at least one segment")
        self.seed = seed
        self.seg = seg
        self.cond_dim = cond_dim
        self.segments = segments
        gh, gw = seg.grid_height, seg.grid_width
        tpc = seg.tokens_per_video_chunk
        ld = seg.latent_channels
        chunks_total = segments * seg.video_chunks_per_segment
        rng = np.random.default_rng(np.random.Philox(key=[seed, 0x5CE17E]))

        # conditioning stand-in: unit-scale vectors, same shape the thinker
        # would hand over (one row per interleaved text/audio token)
        rows = seg.text_tokens_per_segment + seg.audio_tokens_per_segment
        self.conds = rng.normal(0.0, 1.0, (segments, rows, cond_dim)).astype(np.float32)

        amps = rng.uniform(1.0, 2.5, ld) * rng.choice([-1.0, 1.0], ld)
        # projects a segment's mean conditioning row down to a target angle
        steer = rng.normal(0.0, 1.0, (cond_dim, 2)) / math.sqrt(cond_dim)
        center = np.array([(gh - 1) / 2.0, (gw - 1) / 2.0])
        radius = 0.45 * min(gh - 1, gw - 1)
        pull = min(max(speed, 0.05), 0.95)
        pos = center.copy()

        ys, xs = np.mgrid[0:gh, 0:gw]
        inv = 1.0 / (2.0 * blob_sigma * blob_sigma)

        def render() -> np.ndarray:
            bump = np.exp(-((ys - pos[0]) ** 2 + (xs - pos[1]) ** 2) * inv)
            return (bump.reshape(tpc, 1) * amps[None, :]).astype(np.float32)

        self.identity = render()
        frames = np.zeros((chunks_total, tpc, ld), dtype=np.float32)
        c = 0
        for s in range(segments):
            raw = self.conds[s].mean(axis=0) @ steer
            angle = math.atan2(float(raw[0]), float(raw[1]))
            target = center + radius * np.array([math.sin(angle),
                                                 math.cos(angle)])
            for _ in range(seg.video_chunks_per_segment):
                frames[c] = render()
                c += 1
                pos = pos + pull * (target - pos)
        self.chunks = frames

    @property
    def chunk_count(self) -> int:
        return self.chunks.shape[0]

    def cond_bank(self) -> np.ndarray:
        """All segments' conditioning rows stacked, actor bank layout."""
        return self.conds.reshape(-1, self.cond_dim)


def make_scene_pool(data: DataConfig, seg: SegmentConfig, cond_dim: int
                    ) -> list[SyntheticScene]:
    return [SyntheticScene(data.scene_seed + i, seg, cond_dim,
                           data.segments_per_scene, speed=data.speed,
                           blob_sigma=data.blob_sigma)
            for i in range(data.scenes)]


@dataclass
class Batch:
    noisy: np.ndarray       # (B, C, tpc, latent)
    levels: np.ndarray      # (B, C) int
    targets: np.ndarray     # (B, C, tpc, latent); zero rows where level == 0
    conds: np.ndarray       # (B, S*rows, cond_dim)
    identities: np.ndarray  # (B, tpc, latent)
    segments: int           # whole segments covered by each sample


def make_batch(scenes: list[SyntheticScene], seg: SegmentConfig,
               sched: NoiseSchedule, rng: np.random.Generator,
               forcing_mode: str) -> Batch:
    """Noise one window per scene and pair it with velocity targets.

    Diffusion mode draws an independent level for every chunk; teacher mode
    keeps history clean and noises only the last chunk. Level-0 chunks carry
    no training signal, so their target rows are zeroed.
    """
    if forcing_mode not in _MODES:
        raise ConfigError(f"unknown forcing mode {forcing_mode!r}")
    if not scenes:
        raise ShapeError("empty scene list")
    chunks = scenes[0].chunk_count
    if chunks < 2:
        raise ShapeError("scenes must span at least 2 chunks")
    tpc = seg.tokens_per_video_chunk
    ld = seg.latent_channels
    b = len(scenes)
    noisy = np.zeros((b, chunks, tpc, ld), dtype=np.float32)
    targets = np.zeros_like(noisy)
    levels = np.zeros((b, chunks), dtype=np.int64)
    conds = np.zeros((b,) + scenes[0].cond_bank().shape, dtype=np.float32)
    idents = np.zeros((b, tpc, ld), dtype=np.float32)
    for i, scene in enumerate(scenes):
        if scene.chunk_count != chunks:
            raise ShapeError("scenes in a batch must share chunk count")
        if forcing_mode == DIFFUSION:
            lv = dforce.sample_chunk_noise_levels(chunks, sched.steps, rng)
        else:
            lv = dforce.teacher_forcing_levels(chunks, sched.steps, rng)
        levels[i] = lv
        for c in range(chunks):
            clean = scene.chunks[c]
            k = int(lv[c])
            if k == 0:
                noisy[i, c] = clean
                continue
            eps = rng.standard_normal(clean.shape).astype(np.float32)
            noisy[i, c] = dforce.add_noise(clean, k, eps, sched)
            targets[i, c] = dforce.velocity_target(clean, eps, k, sched)
        conds[i] = scene.cond_bank()
        idents[i] = scene.identity
    segments = chunks // seg.video_chunks_per_segment
    return Batch(noisy, levels, targets, conds, idents, segments)


def batch_loss(model, batch: Batch, *, build_graph: bool = True):
    """Mean squared velocity error over every noised token in the batch.

    Returns the loss Tensor (graph attached) when build_graph, else a float.
    """
    ctx = contextlib.nullcontext() if build_graph else nc.no_grad()
    tpc = model.seg.tokens_per_video_chunk
    with ctx:
        total = None
        count = 0
        for i in range(batch.noisy.shape[0]):
            vel = model.training_velocities(
                batch.noisy[i], batch.levels[i], batch.identities[i],
                batch.conds[i], batch.segments)
            rows = np.flatnonzero(np.repeat(batch.levels[i] > 0, tpc))
            if not rows.size:
                continue
            pred = nc.gather_rows(vel, rows)
            tgt = batch.targets[i].reshape(-1, batch.targets.shape[-1])[rows]
            diff = nc.sub(pred, nc.tensor(tgt.astype(model.dtype)))
            sq = nc.sum_all(nc.mul(diff, diff))
            total = sq if total is None else nc.add(total, sq)
            count += tgt.size
        if total is None:
            raise StateError("batch has no noised chunks to train on")
        loss = nc.scale(total, 1.0 / count)
    return loss if build_graph else loss.item()


@dataclass
class TrainState:
    step: int
    seed: int
    mode: str
    loss_history: list = field(default_factory=list)  # (step, loss, mode)
    moments: dict = field(default_factory=dict)       # name -> (m, v)
    checkpoint_path: str | None = None
    aborted: bool = False


_CKPT_PARAM = "param/"
_CKPT_M = "adam.m/"
_CKPT_V = "adam.v/"


def save_checkpoint(model, state: TrainState, path: str) -> None:
    arrays = {}
    for name, arr in model.graph.state_arrays().items():
        arrays[_CKPT_PARAM + name] = arr
    for name, (m, v) in state.moments.items():
        arrays[_CKPT_M + name] = m
        arrays[_CKPT_V + name] = v
    arrays["meta/step"] = np.float32(state.step)
    arrays["meta/seed"] = np.float32(state.seed)
    arrays["meta/mode"] = np.float32(0.0 if state.mode == DIFFUSION else 1.0)
    save_xtar(path, arrays)


def load_checkpoint(model, path: str) -> TrainState:
    arrays = load_xtar(path)
    params = {}
    moments: dict[str, list] = {}
    for name, arr in arrays.items():
        if name.startswith(_CKPT_PARAM):
            params[name[len(_CKPT_PARAM):]] = arr
        elif name.startswith(_CKPT_M):
            moments.setdefault(name[len(_CKPT_M):], [None, None])[0] = arr
        elif name.startswith(_CKPT_V):
            moments.setdefault(name[len(_CKPT_V):], [None, None])[1] = arr
    model.graph.load_state(params)
    state = TrainState(
        step=int(arrays["meta/step"]),
        seed=int(arrays["meta/seed"]),
        mode=DIFFUSION if float(arrays["meta/mode"]) == 0.0 else TEACHER,
        moments={k: (m, v) for k, (m, v) in moments.items()},
        checkpoint_path=path,
    )
    return state


def _adam_update(model, state: TrainState, lr: float, step: int,
                 trainable: set[str] | None) -> None:
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in model.graph.parameters.items():
        if trainable is not None and name not in trainable:
            continue
        g = p.grad
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def train(model, data: DataConfig, steps: int, lr: float = 3e-4, *,
          batch_size: int = 8, mode: str = DIFFUSION, seed: int = 0,
          sched: NoiseSchedule | None = None, out_dir: str | None = None,
          log_every: int = 50, checkpoint_every: int = 1000,
          resume: str | None = None, trainable: list[str] | None = None,
          fixed_batch: bool = False) -> TrainState:
    """Run the Adam training loop; returns the final state.

    trainable=[] freezes everything (updates skipped); fixed_batch reuses the
    step-0 batch forever, the classic overfit-one-batch sanity check. On a
    non-finite loss the last good state is checkpointed and StateError raised.
    """
    if steps < 1 and resume is None:
        raise ConfigError("steps must be >= 1")
    if mode not in _MODES:
        raise ConfigError(f"unknown forcing mode {mode!r}")
    sched = sched or dforce.cosine_schedule()
    pool = make_scene_pool(data, model.seg, model.cfg.cond_dim)
    trainset = None if trainable is None else set(trainable)

    if resume is not None:
        state = load_checkpoint(model, resume)
        if state.mode != mode:
            raise ConfigError(
                f"checkpoint was trained in mode {state.mode!r}, not {mode!r}")
        seed = state.seed
    else:
        state = TrainState(step=0, seed=seed, mode=mode)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    last_good = None  # (step, params, moments) that produced a finite loss
    frozen_batch = None
    for step in range(state.step, steps):
        rng = np.random.Generator(np.random.Philox(key=[seed, step]))
        if fixed_batch and frozen_batch is not None:
            batch = frozen_batch
        else:
            pick = rng.integers(0, len(pool), size=batch_size)
            batch = make_batch([pool[j] for j in pick], model.seg, sched,
                               rng, mode)
            if fixed_batch:
                frozen_batch = batch
        model.graph.zero_grad()
        loss = batch_loss(model, batch)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            state.aborted = True
            if last_good is not None and out_dir is not None:
                g_step, g_params, g_moments = last_good
                model.graph.load_state(g_params)
                state.moments = g_moments
                state.step = g_step
                path = os.path.join(out_dir, "last_good.xtar")
                save_checkpoint(model, state, path)
                state.checkpoint_path = path
            _write_history(state, out_dir)
            raise StateError(
                f"non-finite loss at step {step}"
                + (f"; last good checkpoint: {state.checkpoint_path}"
                   if state.checkpoint_path else ""))
        last_good = (step,
                     {k: a.copy() for k, a in model.graph.state_arrays().items()},
                     {k: (m.copy(), v.copy()) for k, (m, v) in state.moments.items()})
        if step % log_every == 0:
            state.loss_history.append((step, loss_val, mode))
        if trainset is None or trainset:
            loss.backward()
            _adam_update(model, state, lr, step, trainset)
        state.step = step + 1
        if out_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_step{state.step}.xtar")
            save_checkpoint(model, state, path)
            state.checkpoint_path = path

    if out_dir is not None:
        path = os.path.join(out_dir, "checkpoint.xtar")
        save_checkpoint(model, state, path)
        state.checkpoint_path = path
        _write_history(state, out_dir)
    return state


def _write_history(state: TrainState, out_dir: str | None) -> None:
    if out_dir is None:
        return
    with open(os.path.join(out_dir, "loss.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "mode"])
        writer.writerows(state.loss_history)


def smoothed_endpoints(history: list, window: int = 5) -> tuple[float, float]:
    """Mean of the first and last `window` recorded losses."""
    vals = [h[1] for h in history]
    if not vals:
        raise StateError("empty loss history")
    w = min(window, len(vals))
    return float(np.mean(vals[:w])), float(np.mean(vals[-w:]))


@dataclass
class DriftReport:
    label: str
    errors: np.ndarray       # (horizon,) mean squared latent error per chunk
    diverged: bool
    mean_error: float
    max_error: float


def measure_drift(model, scene: SyntheticScene, sched: NoiseSchedule,
                  horizon_chunks: int, *, label: str = DIFFUSION,
                  seed: int = 0) -> DriftReport:
    """Roll the model out and score each generated chunk against ground truth.

    The rollout runs the production pyramid session conditioned on the
    scene's own conditioning stream and identity frame. Divergence (error
    beyond DIVERGENCE_LIMIT) is flagged in the report, never raised.
    """
    from .actor import GenerationSession  # local import, avoids cycle

    if horizon_chunks < 1:
        raise ConfigError("horizon_chunks must be >= 1")
    if horizon_chunks > scene.chunk_count:
        raise StateError(
            f"scene has {scene.chunk_count} chunks, horizon wants {horizon_chunks}")
    v = model.seg.video_chunks_per_segment
    need_segments = -(-horizon_chunks // v)

    def cond_stream():
        for s in range(need_segments):
            yield scene.conds[s]

    session = GenerationSession(model, sched, scene.identity, seed=seed)
    errors = np.zeros(horizon_chunks, dtype=np.float64)
    produced = 0
    for chunk in session.run(cond_stream()):
        if chunk.chunk_index >= horizon_chunks:
            break
        diff = chunk.latents.astype(np.float64) - scene.chunks[chunk.chunk_index]
        errors[chunk.chunk_index] = float(np.mean(diff * diff))
        produced += 1
        if produced == horizon_chunks:
            break
    if produced < horizon_chunks:
        errors = errors[:produced]
    diverged = bool(errors.size and errors.max() > DIVERGENCE_LIMIT)
    return DriftReport(label=label, errors=errors, diverged=diverged,
                       mean_error=float(errors.mean()) if errors.size else float("nan"),
                       max_error=float(errors.max()) if errors.size else float("nan"))
