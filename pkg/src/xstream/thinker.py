"""Deterministic toy Thinker: a frozen seeded transformer over a token ring.

The Thinker consumes streaming user queries (text or audio token ids),
maintains a bounded conversational context with FIFO eviction, and emits one
segment at a time: a text block, then an audio block, greedy-decoded, along
with the final-layer hidden state of each emitted token. Those hidden states
are the conditioning interface to the video Actor; nothing here is trained.

The context object owns the incremental K/V state of the frozen model, so
stepping is a pure function of (model seed, context): copying a context and
stepping both copies yields identical results.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InputError, StateError
from .interleave import SegmentConfig
from .numcore.kernels import active as _k

TEXT = "text"
AUDIO = "audio"
_MODALITIES = (TEXT, AUDIO)
ROLE_USER = "user"
ROLE_AGENT = "agent"


@dataclass(frozen=True)
class ThinkerConfig:
    vocab_text: int = 256
    vocab_audio: int = 256
    hidden_dim: int = 64
    heads: int = 4
    context_limit: int = 8192
    layers: int = 2

    def __post_init__(self):
        for name in ("vocab_text", "vocab_audio", "hidden_dim", "heads",
                     "context_limit", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // self.heads) % 2:
            raise ConfigError("head_dim must be even for rotary positions")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ThinkerConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown thinker config key {key!r}")
            try:
                kwargs[key] = int(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        return cls(**kwargs)


class _LayerKV:
    """Append-only K/V ring for one layer, laid out (heads, capacity, head_dim)."""

    def __init__(self, heads: int, head_dim: int, capacity: int):
        self.k = np.zeros((heads, capacity, head_dim), dtype=np.float32)
        self.v = np.zeros((heads, capacity, head_dim), dtype=np.float32)
        self.start = 0
        self.end = 0

    def __len__(self) -> int:
        return self.end - self.start

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        cap = self.k.shape[1]
        if self.end == cap:
            n = len(self)
            self.k[:, :n] = self.k[:, self.start:self.end]
            self.v[:, :n] = self.v[:, self.start:self.end]
            self.start, self.end = 0, n
        self.k[:, self.end] = k_row
        self.v[:, self.end] = v_row
        self.end += 1

    def drop_oldest(self) -> None:
        if not len(self):
            raise StateError("dropping from an empty K/V ring")
        self.start += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.k[:, self.start:self.end], self.v[:, self.start:self.end]

    def copy(self) -> "_LayerKV":
        out = _LayerKV.__new__(_LayerKV)
        out.k = self.k.copy()
        out.v = self.v.copy()
        out.start = self.start
        out.end = self.end
        return out


@dataclass(frozen=True)
class ContextEntry:
    token_id: int
    modality: str
    role: str


class ConversationContext:
    """Token ring plus the frozen model's incremental attention state.

    Entries and cached K/V rows correspond one to one; eviction drops both
    in lockstep. Token positions keep counting up monotonically across
    evictions, so rotary angles never shift for retained tokens.
    """

    def __init__(self, cfg: ThinkerConfig):
        self.cfg = cfg
        self.entries: deque[ContextEntry] = deque()
        self.next_position = 0
        capacity = cfg.context_limit + 64
        self._layers = [_LayerKV(cfg.heads, cfg.head_dim, capacity)
                        for _ in range(cfg.layers)]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_entry(self) -> ContextEntry:
        if not self.entries:
            raise StateError("context is empty")
        return self.entries[-1]

    def copy(self) -> "ConversationContext":
        out = ConversationContext.__new__(ConversationContext)
        out.cfg = self.cfg
        out.entries = deque(self.entries)
        out.next_position = self.next_position
        out._layers = [layer.copy() for layer in self._layers]
        return out

    def _evict_to_limit(self) -> None:
        while len(self.entries) > self.cfg.context_limit:
            self.entries.popleft()
            for layer in self._layers:
                layer.drop_oldest()


class Thinker:
    """Frozen seeded transformer emitting interleaved text/audio segments."""

    def __init__(self, cfg: ThinkerConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        h = cfg.hidden_dim

        def mat(*shape):
            return rng.normal(0.0, 0.02, shape).astype(np.float32)

        self.emb_text = mat(cfg.vocab_text, h)
        self.emb_audio = mat(cfg.vocab_audio, h)
        # four token kinds: (text|audio) x (user|agent)
        self.emb_kind = mat(4, h)
        self.blocks = []
        for _ in range(cfg.layers):
            self.blocks.append({
                "ln1": (np.ones(h, np.float32), np.zeros(h, np.float32)),
                "wq": mat(h, h), "bq": np.zeros(h, np.float32),
                "wk": mat(h, h), "bk": np.zeros(h, np.float32),
                "wv": mat(h, h), "bv": np.zeros(h, np.float32),
                "wo": mat(h, h), "bo": np.zeros(h, np.float32),
                "ln2": (np.ones(h, np.float32), np.zeros(h, np.float32)),
                "w1": mat(h, 4 * h), "b1": np.zeros(4 * h, np.float32),
                "w2": mat(4 * h, h), "b2": np.zeros(h, np.float32),
            })
        self.lnf = (np.ones(h, np.float32), np.zeros(h, np.float32))
        self.head_text = mat(h, cfg.vocab_text)
        self.head_audio = mat(h, cfg.vocab_audio)
        half = cfg.head_dim // 2
        self._freqs = (10000.0 ** (-2.0 * np.arange(half) / cfg.head_dim))
        self._scale = 1.0 / math.sqrt(cfg.head_dim)

    def new_context(self) -> ConversationContext:
        return ConversationContext(self.cfg)

    # -- internals -----------------------------------------------------------

    def _rotate(self, x: np.ndarray, position: int) -> np.ndarray:
        """Rotary rotation of (heads, head_dim) rows at an integer position."""
        ang = position * self._freqs
        cos = np.cos(ang).astype(np.float32)
        sin = np.sin(ang).astype(np.float32)
        out = np.empty_like(x)
        out[:, 0::2] = x[:, 0::2] * cos - x[:, 1::2] * sin
        out[:, 1::2] = x[:, 0::2] * sin + x[:, 1::2] * cos
        return out

    def _embed(self, entry: ContextEntry) -> np.ndarray:
        table = self.emb_text if entry.modality == TEXT else self.emb_audio
        kind = (0 if entry.modality == TEXT else 1) * 2 + \
               (0 if entry.role == ROLE_USER else 1)
        return table[entry.token_id] + self.emb_kind[kind]

    def _advance(self, ctx: ConversationContext, entry: ContextEntry) -> np.ndarray:
        """Append one token, extend the cache, return its final-layer hidden."""
        cfg = self.cfg
        pos = ctx.next_position
        x = self._embed(entry)[None, :]  # (1, h)
        for layer, blk in enumerate(self.blocks):
            a = _k.layernorm_fwd(x, *blk["ln1"], 1e-5)[0]
            q = self._rotate((a @ blk["wq"] + blk["bq"]).reshape(cfg.heads, cfg.head_dim), pos)
            kr = self._rotate((a @ blk["wk"] + blk["bk"]).reshape(cfg.heads, cfg.head_dim), pos)
            vr = (a @ blk["wv"] + blk["bv"]).reshape(cfg.heads, cfg.head_dim)
            ring = ctx._layers[layer]
            ring.append(kr, vr)
            keys, vals = ring.view()  # (H, T, hd)
            scores = (keys @ q[:, :, None])[:, :, 0] * self._scale  # (H, T)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            att = (probs[:, None, :] @ vals)[:, 0, :]  # (H, hd)
            x = x + att.reshape(1, cfg.hidden_dim) @ blk["wo"] + blk["bo"]
            a2 = _k.layernorm_fwd(x, *blk["ln2"], 1e-5)[0]
            hmid = _k.gelu_fwd(np.ascontiguousarray((a2 @ blk["w1"] + blk["b1"]).reshape(-1)))
            x = x + hmid.reshape(1, -1) @ blk["w2"] + blk["b2"]
        ctx.entries.append(entry)
        ctx.next_position = pos + 1
        ctx._evict_to_limit()
        final = _k.layernorm_fwd(x, *self.lnf, 1e-5)[0]
        return final[0]

    # -- public surface ------------------------------------------------------

    def ingest_query(self, ctx: ConversationContext, tokens, modality: str
                     ) -> ConversationContext:
        """Append user tokens to the ring (and the model state) in order."""
        if modality not in _MODALITIES:
            raise InputError(f"unknown modality {modality!r}")
        vocab = self.cfg.vocab_text if modality == TEXT else self.cfg.vocab_audio
        toks = [int(t) for t in tokens]
        for t in toks:
            if not 0 <= t < vocab:
                raise InputError(f"token id {t} outside vocab of {vocab}")
        for t in toks:
            self._advance(ctx, ContextEntry(t, modality, ROLE_USER))
        return ctx

    def step_segment(self, ctx: ConversationContext, seg: SegmentConfig
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Emit one segment: text ids, audio ids, per-token hidden states.

        Greedy argmax decoding; each emitted token's final-layer hidden
        vector (the state that produced it) is returned in emission order,
        text block first. The emitted tokens are appended with role agent.
        """
        if not ctx.entries:
            raise StateError("cannot step a segment on an empty context")
        if self.cfg.context_limit < (seg.text_tokens_per_segment
                                     + seg.audio_tokens_per_segment):
            raise ConfigError("context_limit below one segment's token count")
        hidden = self._hidden_of_last(ctx)
        text_ids = np.zeros(seg.text_tokens_per_segment, dtype=np.int64)
        audio_ids = np.zeros(seg.audio_tokens_per_segment, dtype=np.int64)
        hiddens = np.zeros((seg.text_tokens_per_segment
                            + seg.audio_tokens_per_segment,
                            self.cfg.hidden_dim), dtype=np.float32)
        j = 0
        for i in range(seg.text_tokens_per_segment):
            tok = int(np.argmax(hidden @ self.head_text))
            hiddens[j] = hidden
            text_ids[i] = tok
            hidden = self._advance(ctx, ContextEntry(tok, TEXT, ROLE_AGENT))
            j += 1
        for i in range(seg.audio_tokens_per_segment):
            tok = int(np.argmax(hidden @ self.head_audio))
            hiddens[j] = hidden
            audio_ids[i] = tok
            hidden = self._advance(ctx, ContextEntry(tok, AUDIO, ROLE_AGENT))
            j += 1
        return text_ids, audio_ids, hiddens

    def reference_logits(self, entries, graph: "nc.Graph"
                         ) -> tuple["nc.Tensor", "nc.Tensor", "nc.Tensor"]:
        """Differentiable full-sequence replica of the frozen stack.

        Registers the weights as graph parameters (thinker.*) on first use
        and reuses them afterwards, so the same graph can be re-evaluated
        with nudged values; that makes the whole block structure checkable
        against finite differences and gives a second, cache-free path to
        cross-check incremental stepping. Evaluates all entries in one
        causal pass, ignoring the context limit. Returns the (T, hidden)
        final-layer hiddens plus text and audio logits for every row.
        """
        cfg = self.cfg
        entries = list(entries)
        if not entries:
            raise StateError("reference forward needs at least one entry")

        def par(name, value):
            have = graph.parameters.get(name)
            return have if have is not None else graph.parameter(name, value)

        # one shared table so a single row gather covers both modalities
        vocab = nc.concat_rows([par("thinker.emb_text", self.emb_text),
                                par("thinker.emb_audio", self.emb_audio)])
        ids, kinds = [], []
        for e in entries:
            if e.modality not in _MODALITIES:
                raise InputError(f"unknown modality {e.modality!r}")
            off = 0 if e.modality == TEXT else cfg.vocab_text
            ids.append(off + e.token_id)
            kinds.append((0 if e.modality == TEXT else 1) * 2
                         + (0 if e.role == ROLE_USER else 1))
        x = nc.add(nc.gather_rows(vocab, ids),
                   nc.gather_rows(par("thinker.emb_kind", self.emb_kind), kinds))

        t = len(entries)
        ang = np.arange(t, dtype=np.float64)[:, None] * self._freqs[None, :]
        cos, sin = np.cos(ang), np.sin(ang)
        causal = np.tril(np.ones((t, t), dtype=np.uint8))
        for i, blk in enumerate(self.blocks):
            p = f"thinker.block{i}"
            a = nc.layernorm(x, par(f"{p}.ln1.gain", blk["ln1"][0]),
                             par(f"{p}.ln1.bias", blk["ln1"][1]))
            q = nc.rope(nc.split_heads(nc.add_bias(
                nc.matmul(a, par(f"{p}.wq", blk["wq"])),
                par(f"{p}.bq", blk["bq"])), cfg.heads), cos, sin)
            k = nc.rope(nc.split_heads(nc.add_bias(
                nc.matmul(a, par(f"{p}.wk", blk["wk"])),
                par(f"{p}.bk", blk["bk"])), cfg.heads), cos, sin)
            v = nc.split_heads(nc.add_bias(
                nc.matmul(a, par(f"{p}.wv", blk["wv"])),
                par(f"{p}.bv", blk["bv"])), cfg.heads)
            att = nc.merge_heads(nc.attention(q, k, v, causal, self._scale))
            x = nc.add(x, nc.add_bias(nc.matmul(att, par(f"{p}.wo", blk["wo"])),
                                      par(f"{p}.bo", blk["bo"])))
            a2 = nc.layernorm(x, par(f"{p}.ln2.gain", blk["ln2"][0]),
                              par(f"{p}.ln2.bias", blk["ln2"][1]))
            h = nc.gelu(nc.add_bias(nc.matmul(a2, par(f"{p}.w1", blk["w1"])),
                                    par(f"{p}.b1", blk["b1"])))
            x = nc.add(x, nc.add_bias(nc.matmul(h, par(f"{p}.w2", blk["w2"])),
                                      par(f"{p}.b2", blk["b2"])))
        hid = nc.layernorm(x, par("thinker.lnf.gain", self.lnf[0]),
                           par("thinker.lnf.bias", self.lnf[1]))
        lt = nc.matmul(hid, par("thinker.head_text", self.head_text))
        la = nc.matmul(hid, par("thinker.head_audio", self.head_audio))
        return hid, lt, la

    def _hidden_of_last(self, ctx: ConversationContext) -> np.ndarray:
        """Final-layer hidden of the newest ring entry, from cached state.

        Recomputes only the attention/MLP stack for the last position using
        the stored K/V (the rows already include it), so it is cheap and
        leaves the context untouched.
        """
        cfg = self.cfg
        entry = ctx.entries[-1]
        pos = ctx.next_position - 1
        x = self._embed(entry)[None, :]
        for layer, blk in enumerate(self.blocks):
            a = _k.layernorm_fwd(x, *blk["ln1"], 1e-5)[0]
            q = self._rotate((a @ blk["wq"] + blk["bq"]).reshape(cfg.heads, cfg.head_dim), pos)
            keys, vals = ctx._layers[layer].view()
            scores = (keys @ q[:, :, None])[:, :, 0] * self._scale
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            att = (probs[:, None, :] @ vals)[:, 0, :]
            x = x + att.reshape(1, cfg.hidden_dim) @ blk["wo"] + blk["bo"]
            a2 = _k.layernorm_fwd(x, *blk["ln2"], 1e-5)[0]
            hmid = _k.gelu_fwd(np.ascontiguousarray((a2 @ blk["w1"] + blk["b1"]).reshape(-1)))
            x = x + hmid.reshape(1, -1) @ blk["w2"] + blk["b2"]
        return _k.layernorm_fwd(x, *self.lnf, 1e-5)[0][0]
