"""Rotary embedding invariants: isometry, relative shifts, axis split."""

import numpy as np
import pytest

from xstream import mmrope
from xstream.errors import ConfigError
from xstream.interleave import SegmentConfig, build_segment_plan


def _params():
    return mmrope.RopeParams(16, (8, 4, 4))


def test_params_validation():
    with pytest.raises(ConfigError):
        mmrope.RopeParams(15, (7, 4, 4))
    with pytest.raises(ConfigError):
        mmrope.RopeParams(16, (8, 4, 2))
    with pytest.raises(ConfigError):
        mmrope.RopeParams(16, (8, 5, 3))
    with pytest.raises(ConfigError):
        mmrope.RopeParams(16, (8, 4, 4), base=1.0)


def test_default_split_halves_time():
    p = mmrope.RopeParams.default_split(64)
    assert p.dim_split == (32, 16, 16)
    assert sum(p.dim_split) == 64
    # head dims that do not divide evenly still sum correctly
    for d in (2, 4, 6, 10, 12, 30):
        q = mmrope.RopeParams.default_split(d)
        assert sum(q.dim_split) == d


def test_rotation_preserves_norm():
    rng = np.random.default_rng(3)
    p = _params()
    for _ in range(100):
        x = rng.normal(size=16)
        pos = mmrope.Pos3D(float(rng.uniform(0, 500)), int(rng.integers(0, 40)),
                           int(rng.integers(0, 40)))
        y = mmrope.rotate(x, pos, p)
        assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-6


def test_zero_position_is_identity():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 16))
    y = mmrope.rotate(x, mmrope.Pos3D(0.0, 0, 0), _params())
    assert np.allclose(y, x, atol=1e-12)


@pytest.mark.parametrize("offset", [1, 7, 100])
def test_scores_depend_only_on_relative_position(offset):
    rng = np.random.default_rng(5)
    p = _params()
    q = rng.normal(size=16)
    k = rng.normal(size=16)
    for axis in range(3):
        pos_q = mmrope.Pos3D(3.5, 2, 4)
        pos_k = mmrope.Pos3D(1.25, 7, 1)

        def shifted(pos):
            d = [pos.t, pos.h, pos.w]
            d[axis] += offset
            return mmrope.Pos3D(d[0], int(d[1]), int(d[2]))

        base = mmrope.rotate(q, pos_q, p) @ mmrope.rotate(k, pos_k, p)
        moved = mmrope.rotate(q, shifted(pos_q), p) @ mmrope.rotate(k, shifted(pos_k), p)
        assert abs(base - moved) < 1e-5


def test_one_d_equals_three_d_with_zero_spatial_dims():
    rng = np.random.default_rng(6)
    p1 = mmrope.RopeParams.one_d(16)
    p3 = mmrope.RopeParams(16, (16, 0, 0))
    x = rng.normal(size=(5, 16))
    for t in (0.0, 1.0, 3.75, 120.0):
        a = mmrope.rotate(x, mmrope.Pos3D(t, 9, 9), p1)
        b = mmrope.rotate(x, mmrope.Pos3D(t, 9, 9), p3)
        assert np.array_equal(a, b)
        # spatial coordinates are inert when their blocks are empty
        c = mmrope.rotate(x, mmrope.Pos3D(t, 0, 0), p3)
        assert np.array_equal(b, c)


def test_angle_table_matches_pair_angles():
    p = _params()
    positions = [mmrope.Pos3D(0.5, 1, 2), mmrope.Pos3D(7.0, 0, 3)]
    cos, sin = mmrope.angle_table(positions, p)
    assert cos.shape == (2, 8)
    for i, pos in enumerate(positions):
        ang = mmrope.pair_angles(pos, p)
        assert np.allclose(cos[i], np.cos(ang), atol=1e-12)
        assert np.allclose(sin[i], np.sin(ang), atol=1e-12)


def test_rotate_rejects_wrong_trailing_dim():
    with pytest.raises(ConfigError):
        mmrope.rotate(np.zeros(10), mmrope.Pos3D(1.0), _params())


def _toy_cfg():
    return SegmentConfig(text_tokens_per_segment=4, audio_tokens_per_segment=6,
                         video_chunks_per_segment=3, height=128, width=128,
                         latent_channels=4)


def test_plan_positions_share_one_timeline():
    cfg = _toy_cfg()
    for s in (0, 1, 5):
        plan = build_segment_plan(cfg, s)
        positions = mmrope.positions_for_plan(plan, cfg)
        assert len(positions) == (cfg.text_tokens_per_segment
                                  + cfg.audio_tokens_per_segment
                                  + cfg.video_chunks_per_segment
                                  * cfg.tokens_per_video_chunk)
        # conditioning tokens are 1D: no spatial coordinates
        rows = cfg.text_tokens_per_segment + cfg.audio_tokens_per_segment
        for pos in positions[:rows]:
            assert pos.h == 0 and pos.w == 0
        # video tokens tile the grid at integral chunk times
        video = positions[rows:]
        tpc = cfg.tokens_per_video_chunk
        for c in range(cfg.video_chunks_per_segment):
            chunk = video[c * tpc:(c + 1) * tpc]
            times = {p.t for p in chunk}
            assert times == {float(s * cfg.video_chunks_per_segment + c)}
            assert {(p.h, p.w) for p in chunk} \
                == {(i // cfg.grid_width, i % cfg.grid_width) for i in range(tpc)}


def test_token_times_advance_per_modality():
    # each modality's clock is strictly increasing across segment boundaries;
    # the clocks intentionally disagree with each other (audio outruns video)
    cfg = _toy_cfg()
    p0 = mmrope.positions_for_plan(build_segment_plan(cfg, 0), cfg)
    p1 = mmrope.positions_for_plan(build_segment_plan(cfg, 1), cfg)
    t, a = cfg.text_tokens_per_segment, cfg.audio_tokens_per_segment
    for lo, hi in ((0, t), (t, t + a), (t + a, None)):
        seq = [p.t for p in p0[lo:hi]] + [p.t for p in p1[lo:hi]]
        assert all(b >= a_ for a_, b in zip(seq, seq[1:]))
        assert seq[-1] > seq[0]


def test_identity_positions_precede_stream():
    cfg = _toy_cfg()
    ident = mmrope.identity_positions(cfg)
    assert len(ident) == cfg.tokens_per_video_chunk
    assert all(p.t == -1.0 for p in ident)
    chunk0 = mmrope.video_chunk_positions(cfg, 0)
    assert all(p.t == 0.0 for p in chunk0)
    assert [(p.h, p.w) for p in ident] == [(p.h, p.w) for p in chunk0]
