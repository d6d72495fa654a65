"""Attention mask construction for chunked causal generation.

Self-attention over a token sequence of [identity block][chunk 0][chunk 1]...
is bidirectional inside a chunk and causal across chunks; the identity block
is visible to every query and bidirectional within itself. A token-causal
mode (plain lower triangle over the stream) exists for ablation. Cross
attention from video tokens to conditioning states is block-diagonal per
segment. Masks are uint8 matrices with 1 = attention allowed, matching the
kernel contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import MaskError

CHUNK_CAUSAL = "chunk_causal"
TOKEN_CAUSAL = "token_causal"
_MODES = (CHUNK_CAUSAL, TOKEN_CAUSAL)


@dataclass(frozen=True)
class MaskSpec:
    identity_tokens: int
    chunks: int
    tokens_per_chunk: int
    mode: str = CHUNK_CAUSAL

    def __post_init__(self):
        if self.identity_tokens < 0 or self.chunks < 0 or self.tokens_per_chunk < 0:
            raise MaskError("mask spec counts must be >= 0")
        if self.chunks > 0 and self.tokens_per_chunk == 0:
            raise MaskError("tokens_per_chunk must be >= 1 when chunks > 0")
        if self.mode not in _MODES:
            raise MaskError(f"unknown mask mode {self.mode!r}")

    @property
    def total(self) -> int:
        return self.identity_tokens + self.chunks * self.tokens_per_chunk


@dataclass(frozen=True)
class AttnMask:
    """allowed[q, k] == 1 means query row q may attend key column k."""

    allowed: np.ndarray

    def __post_init__(self):
        a = self.allowed
        if a.ndim != 2 or a.dtype != np.uint8:
            raise MaskError("mask must be a 2D uint8 matrix")
        if a.size and not a.any(axis=1).all():
            raise MaskError("every query must attend at least one key")

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape


def build_self_mask(spec: MaskSpec) -> AttnMask:
    """Self-attention mask over [identity][chunk 0]...[chunk C-1].

    chunk_causal: a query in chunk c sees the identity block, every token of
    chunks < c, and all of chunk c (bidirectional inside the chunk).
    token_causal: lower triangle over the stream tokens, identity columns
    still always visible. Identity queries see the identity block
    bidirectionally in both modes.
    """
    total = spec.total
    if total == 0:
        raise MaskError("mask spec describes zero tokens")
    ident = spec.identity_tokens
    tpc = spec.tokens_per_chunk
    m = np.zeros((total, total), dtype=np.uint8)
    m[:, :ident] = 1
    if spec.mode == CHUNK_CAUSAL:
        for c in range(spec.chunks):
            row0 = ident + c * tpc
            m[row0:row0 + tpc, ident:row0 + tpc] = 1
    else:
        stream = total - ident
        tri = np.tril(np.ones((stream, stream), dtype=np.uint8))
        m[ident:, ident:] = tri
    return AttnMask(m)


def build_cross_mask(video_tokens_per_segment: int, cond_tokens_per_segment: int,
                     segments: int) -> AttnMask:
    """Video queries of segment s attend exactly segment s's cond states."""
    if video_tokens_per_segment < 1 or cond_tokens_per_segment < 1 or segments < 1:
        raise MaskError("cross mask counts must be >= 1")
    rows = segments * video_tokens_per_segment
    cols = segments * cond_tokens_per_segment
    m = np.zeros((rows, cols), dtype=np.uint8)
    for s in range(segments):
        r0 = s * video_tokens_per_segment
        c0 = s * cond_tokens_per_segment
        m[r0:r0 + video_tokens_per_segment, c0:c0 + cond_tokens_per_segment] = 1
    return AttnMask(m)


def visible_window(chunk_index: int, window_tokens: int, tokens_per_chunk: int,
                   identity_tokens: int = 0) -> list[int]:
    """Most recent floor(window/tokens_per_chunk) chunk indices <= chunk_index.

    The identity block is pinned outside the window and never evicted; it is
    not part of the returned chunk list (identity_tokens documents that the
    budget excludes it).
    """
    if tokens_per_chunk < 1:
        raise MaskError("tokens_per_chunk must be >= 1")
    if window_tokens < tokens_per_chunk:
        raise MaskError("window must hold at least one chunk")
    if chunk_index < 0:
        raise MaskError("chunk_index must be >= 0")
    span = window_tokens // tokens_per_chunk
    start = max(0, chunk_index - span + 1)
    return list(range(start, chunk_index + 1))


def window_chunk_span(window_tokens: int, tokens_per_chunk: int) -> int:
    if tokens_per_chunk < 1 or window_tokens < tokens_per_chunk:
        raise MaskError("window must hold at least one chunk")
    return window_tokens // tokens_per_chunk


def build_step_mask(identity_tokens: int, key_chunk_ids: Sequence[int],
                    query_chunk_ids: Sequence[int], tokens_per_chunk: int,
                    window_chunks: int | None = None,
                    noisy_key_ids: Iterable[int] = (),
                    attend_noisy: bool = True) -> AttnMask:
    """Rectangular mask for one generation forward pass.

    Keys are laid out as [identity][key chunks in given order]; queries are
    the listed chunks' tokens in order (a subset of the keys, by id). A query
    chunk q attends key chunk k when k <= q and k is within q's window of
    window_chunks most recent chunks (None = unlimited). With attend_noisy
    false, key chunks listed in noisy_key_ids are hidden from every query
    chunk except themselves (clean-history conditioning). Identity columns
    are always allowed.
    """
    if tokens_per_chunk < 1:
        raise MaskError("tokens_per_chunk must be >= 1")
    qset = set(query_chunk_ids)
    if not qset <= set(key_chunk_ids):
        raise MaskError("every query chunk must appear among the key chunks")
    noisy = set(noisy_key_ids)
    rows = len(query_chunk_ids) * tokens_per_chunk
    cols = identity_tokens + len(key_chunk_ids) * tokens_per_chunk
    if rows == 0 or cols == 0:
        raise MaskError("step mask has no rows or no columns")
    m = np.zeros((rows, cols), dtype=np.uint8)
    m[:, :identity_tokens] = 1
    for qi, q in enumerate(query_chunk_ids):
        r0 = qi * tokens_per_chunk
        for ki, k in enumerate(key_chunk_ids):
            if k > q:
                continue
            if window_chunks is not None and k < q - window_chunks + 1:
                continue
            if not attend_noisy and k in noisy and k != q:
                continue
            c0 = identity_tokens + ki * tokens_per_chunk
            m[r0:r0 + tokens_per_chunk, c0:c0 + tokens_per_chunk] = 1
    return AttnMask(m)


def build_cross_step_mask(query_chunk_segments: Iterable[int],
                          cond_segments: Sequence[int], tokens_per_chunk: int,
                          cond_tokens_per_segment: int) -> AttnMask:
    """Cross mask for active chunks against a concatenated cond bank.

    cond_segments lists the segment id of each cond block in key order; each
    query chunk attends exactly the block matching its own segment.
    """
    seg_list = list(query_chunk_segments)
    rows = len(seg_list) * tokens_per_chunk
    cols = len(cond_segments) * cond_tokens_per_segment
    if rows == 0 or cols == 0:
        raise MaskError("cross step mask has no rows or no columns")
    m = np.zeros((rows, cols), dtype=np.uint8)
    for qi, seg in enumerate(seg_list):
        matches = [i for i, s in enumerate(cond_segments) if s == seg]
        if not matches:
            raise MaskError(f"no conditioning block for segment {seg}")
        r0 = qi * tokens_per_chunk
        for i in matches:
            c0 = i * cond_tokens_per_segment
            m[r0:r0 + tokens_per_chunk, c0:c0 + cond_tokens_per_segment] = 1
    return AttnMask(m)
