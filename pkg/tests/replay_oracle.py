"""Cache-free reference for chunk-wise generation.

Every round rebuilds the entire visible sequence from scratch: identity
block, all finalized chunks so far, and the in-flight noisy chunks. The
sliding window is enforced purely through the step mask, so nothing is
ever evicted here. A session that reuses cached K/V must produce the
same latents this replay produces.
"""

from __future__ import annotations

import numpy as np

import xstream.numcore as nc
from xstream.attnmask import (
    build_cross_step_mask,
    build_step_mask,
    window_chunk_span,
)
from xstream.dforce import chunk_noise, ddim_step
from xstream.mmrope import identity_positions, video_chunk_positions


def _replay_round(model, identity_latents, banks, finalized, active,
                  noisy_context):
    """One full-sequence forward. Returns {chunk_index: velocity rows}."""
    seg, cfg = model.seg, model.cfg
    tpc = seg.tokens_per_video_chunk
    span = window_chunk_span(cfg.window_tokens, tpc)
    ident = tpc if cfg.use_identity_ref else 0
    cond_tokens = seg.text_tokens_per_segment + seg.audio_tokens_per_segment

    ids = sorted(finalized) + sorted(active)
    lat_parts, lvl_parts, positions = [], [], []
    if ident:
        lat_parts.append(identity_latents)
        lvl_parts.append(np.zeros(tpc, dtype=np.int64))
        positions += identity_positions(seg)
    for cid in ids:
        if cid in finalized:
            lat_parts.append(finalized[cid])
            lvl_parts.append(np.zeros(tpc, dtype=np.int64))
        else:
            lat, level = active[cid]
            lat_parts.append(lat)
            lvl_parts.append(np.full(tpc, level, dtype=np.int64))
        positions += video_chunk_positions(seg, cid)
    flat = np.concatenate(lat_parts).astype(model.dtype, copy=False)
    levels = np.concatenate(lvl_parts)

    chunk_mask = build_step_mask(
        ident, ids, ids, tpc, window_chunks=span,
        noisy_key_ids=sorted(active), attend_noisy=noisy_context).allowed
    total = ident + len(ids) * tpc
    mask = np.zeros((total, total), dtype=np.uint8)
    if ident:
        mask[:ident, :ident] = 1
    mask[ident:] = chunk_mask

    V = seg.video_chunks_per_segment
    seg_ids = [cid // V for cid in ids]
    bank_segs = sorted(set(seg_ids))
    times: list[float] = []
    bank_rows = []
    for s in bank_segs:
        bank_rows.append(np.asarray(banks[s]))
        times += model.cond_times_for_segment(s)
    with nc.no_grad():
        cond_kv = model.project_cond(
            nc.tensor(np.concatenate(bank_rows).astype(model.dtype)), times)
        cross = build_cross_step_mask(seg_ids, bank_segs, tpc,
                                      cond_tokens).allowed
        vel, _ = model.forward_tokens(flat, levels, positions, mask,
                                      cond_kv=cond_kv, cross_mask=cross,
                                      identity_rows=ident)
    out = {}
    for j, cid in enumerate(ids):
        if cid in active:
            i0 = ident + j * tpc
            out[cid] = vel.data[i0:i0 + tpc]
    return out


def replay_pyramid(model, sched, identity_latents, banks, seed,
                   noisy_context=True):
    """Staggered-wavefront generation without a KV cache.

    banks: one (cond_tokens, cond_dim) array per segment. Returns
    {chunk_index: (tokens_per_chunk, latent_dim) finalized latents}.
    """
    seg, cfg = model.seg, model.cfg
    tpc = seg.tokens_per_video_chunk
    total = len(banks) * seg.video_chunks_per_segment
    steps = sched.steps
    if cfg.use_identity_ref:
        identity_latents = identity_latents.astype(model.dtype, copy=False)
    finalized: dict[int, np.ndarray] = {}
    active: dict[int, tuple[np.ndarray, int]] = {}
    next_chunk = 0
    while True:
        if next_chunk < total:
            noise = chunk_noise(seed, next_chunk, (tpc, cfg.latent_dim),
                                dtype=model.dtype)
            active[next_chunk] = (noise, steps)
            next_chunk += 1
        if not active:
            break
        vels = _replay_round(model, identity_latents, banks, finalized,
                             active, noisy_context)
        for cid in sorted(active):
            lat, level = active[cid]
            nxt = ddim_step(lat, vels[cid], level, level - 1, sched)
            if level - 1 == 0:
                del active[cid]
                finalized[cid] = nxt
            else:
                active[cid] = (nxt, level - 1)
    return finalized


def replay_naive(model, sched, identity_latents, banks, seed):
    """One-chunk-at-a-time generation without a KV cache."""
    seg, cfg = model.seg, model.cfg
    tpc = seg.tokens_per_video_chunk
    total = len(banks) * seg.video_chunks_per_segment
    if cfg.use_identity_ref:
        identity_latents = identity_latents.astype(model.dtype, copy=False)
    finalized: dict[int, np.ndarray] = {}
    for cid in range(total):
        lat = chunk_noise(seed, cid, (tpc, cfg.latent_dim), dtype=model.dtype)
        for level in range(sched.steps, 0, -1):
            vels = _replay_round(model, identity_latents, banks, finalized,
                                 {cid: (lat, level)}, True)
            lat = ddim_step(lat, vels[cid], level, level - 1, sched)
        finalized[cid] = lat
    return finalized
