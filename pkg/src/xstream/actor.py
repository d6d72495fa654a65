"""The video transformer: latent/timestep projection, masked self-attention,
per-block cross-attention to conditioning states, KV-cached chunk-wise
generation with identity pinning, and velocity prediction.

The same parameterized forward serves three callers: full-sequence training
over noised chunks, single-chunk inference against a cache, and the pyramid
generation session that denoises a sliding wavefront of chunks with one
forward pass per round. Sequence layout everywhere is [identity block]
[chunk 0][chunk 1]... with video latent tokens only; text/audio conditioning
enters through cross-attention, never through the self-attention sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numcore as nc
from .attnmask import (
    CHUNK_CAUSAL,
    TOKEN_CAUSAL,
    MaskSpec,
    build_cross_mask,
    build_cross_step_mask,
    build_self_mask,
    build_step_mask,
    window_chunk_span,
)
from .dforce import NoiseSchedule, chunk_noise, ddim_step
from .errors import ConfigError, ShapeError, StateError, TruncationError
from .interleave import (
    SegmentConfig,
    audio_token_time,
    text_token_time,
)
from .mmrope import Pos3D, RopeParams, angle_table, identity_positions, video_chunk_positions

DIFFUSION_FORCING = "diffusion"
TEACHER_FORCING = "teacher"
_FORCING_MODES = (DIFFUSION_FORCING, TEACHER_FORCING)

_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


@dataclass(frozen=True)
class ActorConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    cond_dim: int = 64
    latent_dim: int = 8
    time_embed_dim: int = 32
    rope_base: float = 10000.0
    rope_dim_split: tuple[int, int, int] | None = None  # None = default split
    window_tokens: int = 2048
    use_identity_ref: bool = True
    mask_mode: str = CHUNK_CAUSAL
    forcing_mode: str = DIFFUSION_FORCING

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "cond_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even and >= 2")
        if self.mask_mode not in (CHUNK_CAUSAL, TOKEN_CAUSAL):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.forcing_mode not in _FORCING_MODES:
            raise ConfigError(f"unknown forcing_mode {self.forcing_mode!r}")
        if self.window_tokens < 1:
            raise ConfigError("window_tokens must be >= 1")
        if self.rope_dim_split is not None:
            if len(self.rope_dim_split) != 3:
                raise ConfigError("rope_dim_split needs exactly three parts")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ActorConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown actor config key {key!r}")
            if key in ("use_identity_ref",):
                val = _BOOL_WORDS.get(str(raw).strip().lower())
                if val is None:
                    raise ConfigError(f"bad boolean for {key!r}: {raw!r}")
                kwargs[key] = val
            elif key == "rope_base":
                kwargs[key] = float(raw)
            elif key == "rope_dim_split":
                parts = [p for p in str(raw).replace(",", " ").split() if p]
                try:
                    kwargs[key] = tuple(int(p) for p in parts)
                except ValueError:
                    raise ConfigError(
                        f"bad rope_dim_split {raw!r}: want three ints") from None
            elif key in ("mask_mode", "forcing_mode"):
                kwargs[key] = str(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)


def sinusoidal_levels(levels: np.ndarray, dim: int, base: float) -> np.ndarray:
    """Per-level sinusoidal features: [sin(k w_i) | cos(k w_i)], float64."""
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(levels, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class ChunkKV:
    """Rotated per-layer key/value rows of one finalized chunk."""

    chunk_index: int
    layers: list[tuple[np.ndarray, np.ndarray]]  # (heads, tokens, head_dim) each


class KVCache:
    """Per-layer rotated K/V for the identity block plus a chunk ring.

    The identity block is pinned for the session's lifetime; committed
    chunks are retained newest-first up to the window span and evicted
    whole. Commit order must follow chunk index order.
    """

    def __init__(self, layers: int, window_tokens: int, tokens_per_chunk: int,
                 identity_tokens: int):
        self.layers = layers
        self.window_tokens = window_tokens
        self.tokens_per_chunk = tokens_per_chunk
        self.identity_tokens = identity_tokens
        self.window_span = window_chunk_span(window_tokens, tokens_per_chunk)
        self.identity: list[tuple[np.ndarray, np.ndarray]] | None = None
        self.chunks: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}

    @property
    def has_identity(self) -> bool:
        return self.identity is not None

    def set_identity(self, kv_per_layer: list[tuple[np.ndarray, np.ndarray]]) -> None:
        if len(kv_per_layer) != self.layers:
            raise StateError("identity K/V layer count mismatch")
        self.identity = kv_per_layer

    def chunk_ids(self) -> list[int]:
        return list(self.chunks)

    def token_count(self) -> int:
        ident = self.identity_tokens if self.identity is not None else 0
        return ident + len(self.chunks) * self.tokens_per_chunk

    def commit(self, chunk_index: int, kv_per_layer: list[tuple[np.ndarray, np.ndarray]]) -> None:
        if len(kv_per_layer) != self.layers:
            raise StateError("chunk K/V layer count mismatch")
        if self.chunks and chunk_index <= max(self.chunks):
            raise StateError(
                f"commit out of order: chunk {chunk_index} after {max(self.chunks)}")
        self.chunks[chunk_index] = kv_per_layer
        while len(self.chunks) > self.window_span:
            oldest = next(iter(self.chunks))
            del self.chunks[oldest]

    def layer_kv(self, layer: int) -> tuple[np.ndarray, np.ndarray] | None:
        """Concatenated (K, V) for one layer: [identity][chunks ascending]."""
        parts_k, parts_v = [], []
        if self.identity is not None:
            parts_k.append(self.identity[layer][0])
            parts_v.append(self.identity[layer][1])
        for kv in self.chunks.values():
            parts_k.append(kv[layer][0])
            parts_v.append(kv[layer][1])
        if not parts_k:
            return None
        return np.concatenate(parts_k, axis=1), np.concatenate(parts_v, axis=1)


def commit_chunk(cache: KVCache, chunk_kv: ChunkKV) -> KVCache:
    """Append a finalized chunk's K/V, evicting the oldest beyond the window."""
    cache.commit(chunk_kv.chunk_index, chunk_kv.layers)
    return cache


@dataclass
class LatentChunk:
    """One finalized (fully denoised) chunk of video latents."""

    chunk_index: int
    segment_index: int
    latents: np.ndarray  # (tokens_per_chunk, latent_dim)


class ActorModel:
    """Toy velocity-prediction transformer over video latent tokens."""

    def __init__(self, cfg: ActorConfig, seg: SegmentConfig, seed: int = 0,
                 dtype=nc.FLOAT32, graph: nc.Graph | None = None):
        if cfg.window_tokens < seg.tokens_per_video_chunk:
            raise ConfigError("window_tokens smaller than one chunk")
        self.cfg = cfg
        self.seg = seg
        self.seed = seed
        self.graph = graph if graph is not None else nc.Graph(dtype=dtype)
        if cfg.rope_dim_split is not None:
            self.rope3d = RopeParams(cfg.head_dim, tuple(cfg.rope_dim_split),
                                     cfg.rope_base)
        else:
            self.rope3d = RopeParams.default_split(cfg.head_dim, cfg.rope_base)
        self.rope1d = RopeParams.one_d(cfg.head_dim, cfg.rope_base)
        self._att_scale = 1.0 / math.sqrt(cfg.head_dim)
        rng = np.random.default_rng(seed)
        self._build_params(rng)

    # -- parameters ---------------------------------------------------------

    def _linear(self, rng, name: str, nin: int, nout: int):
        w = self.graph.parameter(f"{name}.w", rng.normal(0.0, 0.02, (nin, nout)))
        b = self.graph.parameter(f"{name}.b", np.zeros(nout))
        return w, b

    def _norm(self, name: str, dim: int):
        g = self.graph.parameter(f"{name}.gain", np.ones(dim))
        b = self.graph.parameter(f"{name}.bias", np.zeros(dim))
        return g, b

    def _build_params(self, rng) -> None:
        c = self.cfg
        self.vproj1 = self._linear(rng, "actor.vproj.fc1", c.latent_dim, c.model_dim)
        self.vproj2 = self._linear(rng, "actor.vproj.fc2", c.model_dim, c.model_dim)
        self.tproj1 = self._linear(rng, "actor.tproj.fc1", c.time_embed_dim, c.model_dim)
        self.tproj2 = self._linear(rng, "actor.tproj.fc2", c.model_dim, c.model_dim)
        self.blocks = []
        for i in range(c.layers):
            p = f"actor.block{i}"
            self.blocks.append({
                "ln1": self._norm(f"{p}.ln1", c.model_dim),
                "q": self._linear(rng, f"{p}.attn.q", c.model_dim, c.model_dim),
                "k": self._linear(rng, f"{p}.attn.k", c.model_dim, c.model_dim),
                "v": self._linear(rng, f"{p}.attn.v", c.model_dim, c.model_dim),
                "o": self._linear(rng, f"{p}.attn.o", c.model_dim, c.model_dim),
                "lnc": self._norm(f"{p}.lnc", c.model_dim),
                "cq": self._linear(rng, f"{p}.cross.q", c.model_dim, c.model_dim),
                "ck": self._linear(rng, f"{p}.cross.k", c.cond_dim, c.model_dim),
                "cv": self._linear(rng, f"{p}.cross.v", c.cond_dim, c.model_dim),
                "co": self._linear(rng, f"{p}.cross.o", c.model_dim, c.model_dim),
                "ln2": self._norm(f"{p}.ln2", c.model_dim),
                "fc1": self._linear(rng, f"{p}.mlp.fc1", c.model_dim, 4 * c.model_dim),
                "fc2": self._linear(rng, f"{p}.mlp.fc2", 4 * c.model_dim, c.model_dim),
            })
        self.lnf = self._norm("actor.lnf", c.model_dim)
        # zero-init output head: untrained model predicts zero velocity, so the
        # step-0 loss equals the target's second moment (a testable quantity)
        self.head = (
            self.graph.parameter("actor.head.w",
                                 np.zeros((c.model_dim, c.latent_dim))),
            self.graph.parameter("actor.head.b", np.zeros(c.latent_dim)),
        )

    @property
    def dtype(self):
        return self.graph.dtype

    # -- embedding ----------------------------------------------------------

    def embed_inputs(self, latents: np.ndarray, levels) -> nc.Tensor:
        """Summed latent and timestep projections, (tokens, model_dim).

        levels may be a scalar noise level or a per-token integer array.
        """
        latents = np.asarray(latents)
        if latents.ndim != 2 or latents.shape[1] != self.cfg.latent_dim:
            raise ShapeError(
                f"latents {latents.shape} do not match latent_dim {self.cfg.latent_dim}")
        lv = np.broadcast_to(np.asarray(levels, dtype=np.int64),
                             (latents.shape[0],))
        x = nc.tensor(latents.astype(self.dtype, copy=False))
        h = nc.gelu(nc.add_bias(nc.matmul(x, self.vproj1[0]), self.vproj1[1]))
        h = nc.add_bias(nc.matmul(h, self.vproj2[0]), self.vproj2[1])
        sin = sinusoidal_levels(lv, self.cfg.time_embed_dim, self.cfg.rope_base)
        t = nc.tensor(sin.astype(self.dtype))
        t = nc.gelu(nc.add_bias(nc.matmul(t, self.tproj1[0]), self.tproj1[1]))
        t = nc.add_bias(nc.matmul(t, self.tproj2[0]), self.tproj2[1])
        return nc.add(h, t)

    # -- conditioning -------------------------------------------------------

    def cond_times_for_segment(self, segment_index: int) -> list[float]:
        """Timeline positions of one segment's conditioning states, plan order."""
        seg = self.seg
        times = [text_token_time(seg, segment_index, j).time_index
                 for j in range(seg.text_tokens_per_segment)]
        base = segment_index * seg.audio_tokens_per_segment
        times += [audio_token_time(seg, base + j).time_index
                  for j in range(seg.audio_tokens_per_segment)]
        return times

    def project_cond(self, bank: nc.Tensor, times: Sequence[float]
                     ) -> list[tuple[nc.Tensor, nc.Tensor]]:
        """Per-layer cross K/V from conditioning states, keys roped on time."""
        if bank.shape[0] != len(times):
            raise ShapeError("cond bank rows do not match time count")
        if bank.shape[1] != self.cfg.cond_dim:
            raise ShapeError(
                f"cond bank dim {bank.shape[1]} != cond_dim {self.cfg.cond_dim}")
        cos, sin = angle_table([Pos3D(t, 0, 0) for t in times], self.rope1d)
        out = []
        for blk in self.blocks:
            k = nc.split_heads(nc.add_bias(nc.matmul(bank, blk["ck"][0]), blk["ck"][1]),
                               self.cfg.heads)
            k = nc.rope(k, cos, sin)
            v = nc.split_heads(nc.add_bias(nc.matmul(bank, blk["cv"][0]), blk["cv"][1]),
                               self.cfg.heads)
            out.append((k, v))
        return out

    # -- the shared forward -------------------------------------------------

    def forward_tokens(self, latents: np.ndarray, levels: np.ndarray,
                       positions: Sequence[Pos3D], self_mask: np.ndarray,
                       cache: KVCache | None = None,
                       cond_kv: list[tuple[nc.Tensor, nc.Tensor]] | None = None,
                       cross_mask: np.ndarray | None = None,
                       identity_rows: int = 0,
                       capture_kv: bool = False
                       ) -> tuple[nc.Tensor, list[tuple[np.ndarray, np.ndarray]]]:
        """One backbone pass over a token batch.

        latents: (T, latent_dim) noisy inputs; levels: per-token noise level;
        positions: T spatiotemporal positions; self_mask: (T, cached + T)
        allowed matrix. cond_kv/cross_mask apply cross-attention to the
        non-identity rows (the first identity_rows rows skip it). Returns the
        velocity tensor (T, latent_dim) and, when capture_kv, each layer's
        rotated K/V rows for these tokens.
        """
        t_new = latents.shape[0]
        if len(positions) != t_new:
            raise ShapeError("positions do not match token count")
        cached = cache.token_count() if cache is not None else 0
        if self_mask.shape != (t_new, cached + t_new):
            raise ShapeError(
                f"self mask {self_mask.shape} != ({t_new}, {cached + t_new})")
        cos3, sin3 = angle_table(positions, self.rope3d)
        q_times = [Pos3D(p.t, 0, 0) for p in positions[identity_rows:]]
        cos1, sin1 = (angle_table(q_times, self.rope1d)
                      if cond_kv is not None else (None, None))

        x = self.embed_inputs(latents, levels)
        captured: list[tuple[np.ndarray, np.ndarray]] = []
        for layer, blk in enumerate(self.blocks):
            a = nc.layernorm(x, *blk["ln1"])
            q = nc.rope(nc.split_heads(
                nc.add_bias(nc.matmul(a, blk["q"][0]), blk["q"][1]), self.cfg.heads),
                cos3, sin3)
            k = nc.rope(nc.split_heads(
                nc.add_bias(nc.matmul(a, blk["k"][0]), blk["k"][1]), self.cfg.heads),
                cos3, sin3)
            v = nc.split_heads(
                nc.add_bias(nc.matmul(a, blk["v"][0]), blk["v"][1]), self.cfg.heads)
            if capture_kv:
                captured.append((k.data.copy(), v.data.copy()))
            if cache is not None and cached:
                prior = cache.layer_kv(layer)
                k_all = nc.concat_tokens(nc.tensor(prior[0]), k)
                v_all = nc.concat_tokens(nc.tensor(prior[1]), v)
            else:
                k_all, v_all = k, v
            att = nc.attention(q, k_all, v_all, self_mask, self._att_scale)
            x = nc.add(x, nc.add_bias(
                nc.matmul(nc.merge_heads(att), blk["o"][0]), blk["o"][1]))

            if cond_kv is not None:
                stream = (nc.take_rows(x, identity_rows, t_new)
                          if identity_rows else x)
                a2 = nc.layernorm(stream, *blk["lnc"])
                qc = nc.rope(nc.split_heads(
                    nc.add_bias(nc.matmul(a2, blk["cq"][0]), blk["cq"][1]),
                    self.cfg.heads), cos1, sin1)
                ck, cv = cond_kv[layer]
                catt = nc.attention(qc, ck, cv, cross_mask, self._att_scale)
                delta = nc.add_bias(
                    nc.matmul(nc.merge_heads(catt), blk["co"][0]), blk["co"][1])
                if identity_rows:
                    pad = nc.tensor(np.zeros((identity_rows, self.cfg.model_dim),
                                             dtype=self.dtype))
                    delta = nc.concat_rows([pad, delta])
                x = nc.add(x, delta)

            a3 = nc.layernorm(x, *blk["ln2"])
            h = nc.gelu(nc.add_bias(nc.matmul(a3, blk["fc1"][0]), blk["fc1"][1]))
            x = nc.add(x, nc.add_bias(nc.matmul(h, blk["fc2"][0]), blk["fc2"][1]))

        out = nc.layernorm(x, *self.lnf)
        vel = nc.add_bias(nc.matmul(out, self.head[0]), self.head[1])
        return vel, captured

    # -- single-chunk inference surface --------------------------------------

    def forward_chunk(self, noisy_chunk: np.ndarray, k: int, cond_states: np.ndarray,
                      cache: KVCache, chunk_index: int | None = None,
                      positions: Sequence[Pos3D] | None = None,
                      capture_kv: bool = False,
                      sched: NoiseSchedule | None = None):
        """Velocity prediction for one chunk against the session cache.

        Returns the (tokens, latent_dim) velocity array, or a (velocity,
        ChunkKV) pair when capture_kv is set.
        """
        if self.cfg.use_identity_ref and not cache.has_identity:
            raise StateError("identity block missing from cache")
        if chunk_index is None:
            ids = cache.chunk_ids()
            chunk_index = (max(ids) + 1) if ids else 0
        if positions is None:
            positions = video_chunk_positions(self.seg, chunk_index)
        tpc = self.seg.tokens_per_video_chunk
        if noisy_chunk.shape != (tpc, self.cfg.latent_dim):
            raise ShapeError(f"chunk shape {noisy_chunk.shape} != "
                             f"({tpc}, {self.cfg.latent_dim})")
        ident = cache.identity_tokens if cache.has_identity else 0
        mask = build_step_mask(ident, cache.chunk_ids() + [chunk_index],
                               [chunk_index], tpc,
                               window_chunks=cache.window_span).allowed
        seg_id = chunk_index // self.seg.video_chunks_per_segment
        with nc.no_grad():
            cond_kv = self.project_cond(
                nc.tensor(cond_states.astype(self.dtype, copy=False)),
                self.cond_times_for_segment(seg_id))
            cross = build_cross_step_mask([seg_id], [seg_id], tpc,
                                          cond_states.shape[0]).allowed
            vel, cap = self.forward_tokens(
                noisy_chunk, np.full(tpc, k, dtype=np.int64), positions, mask,
                cache=cache, cond_kv=cond_kv, cross_mask=cross,
                capture_kv=capture_kv)
        if capture_kv:
            return vel.data, ChunkKV(chunk_index, cap)
        return vel.data

    # -- full-sequence training surface --------------------------------------

    def training_velocities(self, noisy_chunks: np.ndarray, levels: np.ndarray,
                            identity_latents: np.ndarray | None,
                            cond_bank: np.ndarray, segments: int) -> nc.Tensor:
        """Velocities for a full training sequence of whole segments.

        noisy_chunks: (C, tokens_per_chunk, latent_dim) with C = segments *
        chunks_per_segment; levels: (C,) per-chunk noise levels; cond_bank:
        (segments * cond_tokens, cond_dim) hidden states in plan order.
        Returns the (C * tokens_per_chunk, latent_dim) velocity tensor.
        """
        seg = self.seg
        tpc = seg.tokens_per_video_chunk
        chunks = noisy_chunks.shape[0]
        if chunks != segments * seg.video_chunks_per_segment:
            raise ShapeError("training sequences must cover whole segments")
        if noisy_chunks.shape[1:] != (tpc, self.cfg.latent_dim):
            raise ShapeError(f"bad chunk token shape {noisy_chunks.shape[1:]}")
        if len(levels) != chunks:
            raise ShapeError("levels must have one entry per chunk")
        cond_tokens = (seg.text_tokens_per_segment + seg.audio_tokens_per_segment)
        if cond_bank.shape != (segments * cond_tokens, self.cfg.cond_dim):
            raise ShapeError(f"cond bank shape {cond_bank.shape} != "
                             f"({segments * cond_tokens}, {self.cfg.cond_dim})")

        use_ident = self.cfg.use_identity_ref
        ident = tpc if use_ident else 0
        if use_ident:
            if identity_latents is None:
                raise StateError("identity latents required when use_identity_ref")
            if identity_latents.shape != (tpc, self.cfg.latent_dim):
                raise ShapeError("bad identity latent shape")
            flat = np.concatenate([identity_latents,
                                   noisy_chunks.reshape(-1, self.cfg.latent_dim)])
            tok_levels = np.concatenate([np.zeros(tpc, dtype=np.int64),
                                         np.repeat(levels, tpc)])
            positions = identity_positions(seg)
        else:
            flat = noisy_chunks.reshape(-1, self.cfg.latent_dim)
            tok_levels = np.repeat(levels, tpc)
            positions = []
        for c in range(chunks):
            positions += video_chunk_positions(seg, c)

        mask = build_self_mask(
            MaskSpec(ident, chunks, tpc, self.cfg.mask_mode)).allowed
        cross = build_cross_mask(seg.video_chunks_per_segment * tpc,
                                 cond_tokens, segments).allowed
        times: list[float] = []
        for s in range(segments):
            times += self.cond_times_for_segment(s)
        cond_kv = self.project_cond(
            nc.tensor(cond_bank.astype(self.dtype, copy=False)), times)
        vel, _ = self.forward_tokens(flat, tok_levels, positions, mask,
                                     cond_kv=cond_kv, cross_mask=cross,
                                     identity_rows=ident)
        total = flat.shape[0]
        return nc.take_rows(vel, ident, total) if ident else vel


# ---------------------------------------------------------------------------
# generation sessions
# ---------------------------------------------------------------------------

PYRAMID = "pyramid"
NAIVE = "naive"


class GenerationSession:
    """Owns one stream's cache and denoising wavefront.

    pyramid mode staggers chunk starts one round apart so each forward pass
    advances every in-flight chunk one level; naive mode denoises chunks
    strictly one at a time. Either way a finalized chunk's K/V enter the
    cache by riding the next forward pass as a clean prefix, which keeps
    the backbone invocation count at chunks + steps - 1 (pyramid) or
    chunks * steps (naive).
    """

    def __init__(self, model: ActorModel, sched: NoiseSchedule,
                 identity_latents: np.ndarray | None, seed: int = 0,
                 mode: str = PYRAMID, noisy_context: bool = True):
        if mode not in (PYRAMID, NAIVE):
            raise ConfigError(f"unknown generation mode {mode!r}")
        self.model = model
        self.sched = sched
        self.seed = seed
        self.mode = mode
        self.noisy_context = noisy_context
        seg = model.seg
        tpc = seg.tokens_per_video_chunk
        ident_tokens = tpc if model.cfg.use_identity_ref else 0
        self.cache = KVCache(model.cfg.layers, model.cfg.window_tokens, tpc,
                             ident_tokens)
        self.denoise_rounds = 0
        self.setup_passes = 0
        self.last_finalized = -1
        self._highest_committed = -1
        self._cond_kv: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
        if model.cfg.use_identity_ref:
            if identity_latents is None:
                raise StateError("identity latents required when use_identity_ref")
            if identity_latents.shape != (tpc, model.cfg.latent_dim):
                raise ShapeError("bad identity latent shape")
            self._prefill_identity(identity_latents)

    def _prefill_identity(self, identity_latents: np.ndarray) -> None:
        seg = self.model.seg
        tpc = seg.tokens_per_video_chunk
        mask = np.ones((tpc, tpc), dtype=np.uint8)
        with nc.no_grad():
            _, cap = self.model.forward_tokens(
                identity_latents.astype(self.model.dtype, copy=False),
                np.zeros(tpc, dtype=np.int64), identity_positions(seg), mask,
                capture_kv=True)
        self.cache.set_identity(cap)
        self.setup_passes += 1

    # -- cond bank handling --------------------------------------------------

    def _pull_cond(self, it: Iterator, segment_index: int) -> bool:
        """Fetch and project the next segment's cond bank. False on clean end."""
        seg = self.model.seg
        cond_tokens = seg.text_tokens_per_segment + seg.audio_tokens_per_segment
        try:
            bank = next(it)
        except StopIteration:
            return False
        bank = np.asarray(bank)
        if bank.ndim != 2 or bank.shape != (cond_tokens, self.model.cfg.cond_dim):
            raise TruncationError(
                f"conditioning for segment {segment_index} has shape "
                f"{bank.shape}, expected ({cond_tokens}, {self.model.cfg.cond_dim})",
                last_chunk_index=self.last_finalized)
        with nc.no_grad():
            kv = self.model.project_cond(
                nc.tensor(bank.astype(self.model.dtype, copy=False)),
                self.model.cond_times_for_segment(segment_index))
        self._cond_kv[segment_index] = [(k.data, v.data) for k, v in kv]
        return True

    def _segment_of(self, chunk_index: int) -> int:
        return chunk_index // self.model.seg.video_chunks_per_segment

    # -- the round loop ------------------------------------------------------

    def run(self, cond_stream: Iterable[np.ndarray]) -> Iterator[LatentChunk]:
        """Yield finalized chunks in index order until cond_stream ends."""
        if self.mode == PYRAMID:
            return self._run_pyramid(iter(cond_stream))
        return self._run_naive(iter(cond_stream))

    def _forward_round(self, pending: dict[int, np.ndarray],
                       active: dict[int, tuple[np.ndarray, int]]):
        """One backbone pass over [pending clean chunks][active noisy chunks]."""
        model = self.model
        seg = model.seg
        tpc = seg.tokens_per_video_chunk
        forward_ids = sorted(pending) + sorted(active)
        lat_parts, lvl_parts, positions = [], [], []
        for cid in forward_ids:
            if cid in pending:
                lat_parts.append(pending[cid])
                lvl_parts.append(np.zeros(tpc, dtype=np.int64))
            else:
                lat, level = active[cid]
                lat_parts.append(lat)
                lvl_parts.append(np.full(tpc, level, dtype=np.int64))
            positions += video_chunk_positions(seg, cid)
        latents = np.concatenate(lat_parts).astype(model.dtype, copy=False)
        levels = np.concatenate(lvl_parts)

        ident = self.cache.identity_tokens if self.cache.has_identity else 0
        mask = build_step_mask(
            ident, self.cache.chunk_ids() + forward_ids, forward_ids, tpc,
            window_chunks=self.cache.window_span,
            noisy_key_ids=list(active), attend_noisy=self.noisy_context).allowed

        seg_ids = [self._segment_of(c) for c in forward_ids]
        bank_segs = sorted(set(seg_ids))
        cond_tokens = seg.text_tokens_per_segment + seg.audio_tokens_per_segment
        cond_kv = []
        for layer in range(model.cfg.layers):
            ks = np.concatenate([self._cond_kv[s][layer][0] for s in bank_segs], axis=1)
            vs = np.concatenate([self._cond_kv[s][layer][1] for s in bank_segs], axis=1)
            cond_kv.append((nc.tensor(ks), nc.tensor(vs)))
        cross = build_cross_step_mask(seg_ids, bank_segs, tpc, cond_tokens).allowed

        with nc.no_grad():
            vel, cap = model.forward_tokens(latents, levels, positions, mask,
                                            cache=self.cache, cond_kv=cond_kv,
                                            cross_mask=cross, capture_kv=True)
        return forward_ids, vel.data, cap

    def _commit_pending(self, pending: dict[int, np.ndarray],
                        forward_ids: list[int],
                        cap: list[tuple[np.ndarray, np.ndarray]]) -> None:
        tpc = self.model.seg.tokens_per_video_chunk
        for cid in sorted(pending):
            i0 = forward_ids.index(cid) * tpc
            layers = [(k[:, i0:i0 + tpc].copy(), v[:, i0:i0 + tpc].copy())
                      for k, v in cap]
            self.cache.commit(cid, layers)
            self._highest_committed = cid
        pending.clear()
        self._drop_stale_conds()

    def _drop_stale_conds(self) -> None:
        """Release cond banks once a segment's chunks are all committed.

        Commits happen in index order, so every chunk of segments below
        (highest_committed + 1) // V is in the cache and will never run
        cross-attention again.
        """
        V = self.model.seg.video_chunks_per_segment
        done_below = (self._highest_committed + 1) // V
        for s in list(self._cond_kv):
            if s < done_below:
                del self._cond_kv[s]

    def _run_pyramid(self, it: Iterator) -> Iterator[LatentChunk]:
        model = self.model
        seg = model.seg
        tpc = seg.tokens_per_video_chunk
        steps = self.sched.steps
        active: dict[int, tuple[np.ndarray, int]] = {}
        pending: dict[int, np.ndarray] = {}
        next_chunk = 0
        conds_done = False
        while True:
            if not conds_done:
                s = self._segment_of(next_chunk)
                if s not in self._cond_kv:
                    if self._pull_cond(it, s):
                        pass
                    else:
                        conds_done = True
                if not conds_done:
                    noise = chunk_noise(self.seed, next_chunk,
                                        (tpc, model.cfg.latent_dim),
                                        dtype=model.dtype)
                    active[next_chunk] = (noise, steps)
                    next_chunk += 1
            if not active:
                break
            forward_ids, vel, cap = self._forward_round(pending, active)
            self.denoise_rounds += 1
            self._commit_pending(pending, forward_ids, cap)
            for cid in sorted(active):
                i0 = forward_ids.index(cid) * tpc
                v_c = vel[i0:i0 + tpc]
                lat, level = active[cid]
                nxt = ddim_step(lat, v_c, level, level - 1, self.sched)
                if level - 1 == 0:
                    del active[cid]
                    pending[cid] = nxt
                    self.last_finalized = cid
                    yield LatentChunk(cid, self._segment_of(cid), nxt)
                else:
                    active[cid] = (nxt, level - 1)

    def _run_naive(self, it: Iterator) -> Iterator[LatentChunk]:
        model = self.model
        seg = model.seg
        tpc = seg.tokens_per_video_chunk
        steps = self.sched.steps
        pending: dict[int, np.ndarray] = {}
        cid = 0
        while True:
            s = self._segment_of(cid)
            if s not in self._cond_kv:
                if not self._pull_cond(it, s):
                    break
            lat = chunk_noise(self.seed, cid, (tpc, model.cfg.latent_dim),
                              dtype=model.dtype)
            level = steps
            while level > 0:
                forward_ids, vel, cap = self._forward_round(
                    pending, {cid: (lat, level)})
                self.denoise_rounds += 1
                self._commit_pending(pending, forward_ids, cap)
                i0 = forward_ids.index(cid) * tpc
                lat = ddim_step(lat, vel[i0:i0 + tpc], level, level - 1, self.sched)
                level -= 1
            pending[cid] = lat
            self.last_finalized = cid
            yield LatentChunk(cid, s, lat)
            cid += 1


def generate_stream(model: ActorModel, cond_stream: Iterable[np.ndarray],
                    identity_latents: np.ndarray | None, sched: NoiseSchedule,
                    seed: int = 0, mode: str = PYRAMID,
                    noisy_context: bool = True) -> Iterator[LatentChunk]:
    """Finalized latent chunks in order; deterministic for a fixed seed."""
    session = GenerationSession(model, sched, identity_latents, seed=seed,
                                mode=mode, noisy_context=noisy_context)
    return session.run(cond_stream)
