"""Dual-worker session pipeline: thinker track, actor track, framed output.

Mirrors the two-device deployment split: the conversational model and the
video model run on their own threads, joined by a bounded segment queue.
A third bounded queue carries finished frames to whoever consumes the
session generator (the transport writer). Producers block when a queue is
full, so a slow consumer throttles the whole pipeline instead of growing
buffers; nothing is dropped.

Frame order is the plan order: per segment, one text frame, one audio
frame, then that segment's video chunks ascending, with segment ids
strictly increasing across the stream. Under realtime pacing, video frames
of segment s are withheld until s * video_segment_seconds after start.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..dforce import NoiseSchedule
from ..errors import ConfigError, StateError
from ..interleave import segment_durations
from .frames import (
    CONTROL_END,
    CONTROL_ERROR,
    CONTROL_START,
    FRAME_AUDIO,
    FRAME_TEXT,
    FRAME_VIDEO,
    StreamFrame,
    audio_frame,
    control_frame,
    text_frame,
    video_frame,
)

REALTIME = "realtime"
UNTHROTTLED = "unthrottled"
_PACINGS = (REALTIME, UNTHROTTLED)

_POLL = 0.05


@dataclass(frozen=True)
class PipelineConfig:
    queue_capacity: int = 2    # segments in flight between thinker and actor
    frame_capacity: int = 32   # frames buffered toward the consumer
    pacing: str = REALTIME
    seed: int = 0

    def __post_init__(self):
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.frame_capacity < 1:
            raise ConfigError("frame_capacity must be >= 1")
        if self.pacing not in _PACINGS:
            raise ConfigError(f"pacing must be one of {_PACINGS}")


@dataclass
class _SegmentPackage:
    index: int
    text_ids: np.ndarray
    audio_ids: np.ndarray
    hiddens: np.ndarray


@dataclass
class _Failure:
    stage: str
    error: BaseException


class _Relay(Exception):
    """Carries an upstream failure through the actor's cond iterator."""

    def __init__(self, failure: _Failure):
        super().__init__(failure.stage)
        self.failure = failure


_DONE = object()
_ABORT = object()


def _put(q: queue.Queue, item, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            q.put(item, timeout=_POLL)
            return True
        except queue.Full:
            continue
    return False


def _get(q: queue.Queue, stop: threading.Event):
    while not stop.is_set():
        try:
            return q.get(timeout=_POLL)
        except queue.Empty:
            continue
    return _ABORT


def run_session(queries, identity, *, thinker, model, sched: NoiseSchedule,
                segments: int, pipeline: PipelineConfig | None = None):
    """Generate the ordered frame stream for one session.

    queries: list of (modality, token ids) ingested before decoding starts.
    Yields control START, then data frames in plan order, then control END.
    A worker failure surfaces as a control ERROR frame followed by clean
    shutdown (threads joined, no partial frames after the error).
    """
    from ..actor import GenerationSession  # session machinery lives with the model

    cfg = pipeline or PipelineConfig()
    if segments < 0:
        raise ConfigError("segments must be >= 0")
    if not queries:
        raise StateError("a session needs at least one query")
    if identity is None and model.cfg.use_identity_ref:
        raise StateError("identity latents required")
    seg = model.seg
    _, video_seconds = segment_durations(seg)

    seg_q: queue.Queue = queue.Queue(maxsize=cfg.queue_capacity)
    frame_q: queue.Queue = queue.Queue(maxsize=cfg.frame_capacity)
    stop = threading.Event()

    def thinker_track():
        try:
            ctx = thinker.new_context()
            for modality, tokens in queries:
                thinker.ingest_query(ctx, tokens, modality)
            for s in range(segments):
                if stop.is_set():
                    return
                text_ids, audio_ids, hiddens = thinker.step_segment(ctx, seg)
                if not _put(seg_q, _SegmentPackage(s, text_ids, audio_ids,
                                                   hiddens), stop):
                    return
            _put(seg_q, _DONE, stop)
        except BaseException as err:  # relayed, not swallowed
            _put(seg_q, _Failure("thinker", err), stop)

    def actor_track():
        t0 = time.monotonic()
        chunks_per_segment = seg.video_chunks_per_segment
        pending: dict[int, _SegmentPackage] = {}
        # announced: highest segment whose text/audio went out;
        # last_video: global index of the last emitted video chunk
        state = {"announced": -1, "last_video": -1, "dead": False}

        def flush_ready():
            """Emit text/audio for the next segment once its turn arrives.

            Segment s's block may go out only after every video chunk of
            segment s-1 (ordering invariant), but must not wait for s's own
            chunks: text streams ahead of the first denoised frame.
            """
            while not state["dead"]:
                nxt = state["announced"] + 1
                if nxt not in pending:
                    return
                if state["last_video"] != nxt * chunks_per_segment - 1:
                    return
                pkg = pending.pop(nxt)
                if not _put(frame_q, text_frame(nxt, pkg.text_ids), stop) or \
                   not _put(frame_q, audio_frame(nxt, pkg.audio_ids), stop):
                    state["dead"] = True
                    return
                state["announced"] = nxt

        def conds():
            while True:
                item = _get(seg_q, stop)
                if item is _ABORT or item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise _Relay(item)
                pending[item.index] = item
                flush_ready()
                yield item.hiddens

        try:
            if segments > 0:
                session = GenerationSession(model, sched, identity,
                                            seed=cfg.seed)
                for chunk in session.run(conds()):
                    if state["dead"]:
                        return
                    s = chunk.segment_index
                    if cfg.pacing == REALTIME:
                        release = t0 + s * video_seconds
                        while not stop.is_set():
                            wait = release - time.monotonic()
                            if wait <= 0:
                                break
                            time.sleep(min(wait, _POLL))
                    if not _put(frame_q, video_frame(s, chunk.chunk_index,
                                                     chunk.latents), stop):
                        return
                    state["last_video"] = chunk.chunk_index
                    flush_ready()
            if not state["dead"]:
                _put(frame_q, _DONE, stop)
        except _Relay as relay:
            _put(frame_q, relay.failure, stop)
        except BaseException as err:
            _put(frame_q, _Failure("actor", err), stop)

    threads = [threading.Thread(target=thinker_track, daemon=True),
               threading.Thread(target=actor_track, daemon=True)]

    def frames():
        try:
            yield control_frame(CONTROL_START, arg=segments)
            for t in threads:
                t.start()
            while True:
                item = _get(frame_q, stop)
                if item is _DONE or item is _ABORT:
                    break
                if isinstance(item, _Failure):
                    yield control_frame(CONTROL_ERROR, arg=1,
                                        message=f"{item.stage}: {item.error}")
                    return
                yield item
            yield control_frame(CONTROL_END)
        finally:
            stop.set()
            for t in threads:
                if t.is_alive():
                    t.join(timeout=5.0)

    return frames()


@dataclass
class LatencyReport:
    first_text_ms: float
    first_video_chunk_ms: float
    chunks_per_second: float
    text_frames: int = 0
    audio_frames: int = 0
    video_frames: int = 0
    wall_ms: float = 0.0
    error: str | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "first_text_ms", "first_video_chunk_ms", "chunks_per_second",
            "text_frames", "audio_frames", "video_frames", "wall_ms",
            "error")}


def measure_latency(session) -> LatencyReport:
    """Consume a session's frame stream and time its milestones.

    Meant for unthrottled pacing; under realtime pacing the numbers include
    the deliberate gating. Token counts are deterministic, timings are not.
    """
    t0 = time.monotonic()
    first_text = first_video = last_video = None
    counts = {FRAME_TEXT: 0, FRAME_AUDIO: 0, FRAME_VIDEO: 0}
    error = None
    from .frames import FRAME_CONTROL, control_from_payload
    for frame in session:
        now = time.monotonic()
        if frame.type == FRAME_CONTROL:
            code, _, msg = control_from_payload(frame.payload)
            if code == CONTROL_ERROR:
                error = msg
            continue
        counts[frame.type] += 1
        if frame.type == FRAME_TEXT and first_text is None:
            first_text = now
        elif frame.type == FRAME_VIDEO:
            last_video = now
            if first_video is None:
                first_video = now
    wall = time.monotonic() - t0
    nan = float("nan")
    cps = 0.0
    if counts[FRAME_VIDEO] and last_video is not None and last_video > t0:
        cps = counts[FRAME_VIDEO] / (last_video - t0)
    return LatencyReport(
        first_text_ms=(first_text - t0) * 1e3 if first_text else nan,
        first_video_chunk_ms=(first_video - t0) * 1e3 if first_video else nan,
        chunks_per_second=cps,
        text_frames=counts[FRAME_TEXT],
        audio_frames=counts[FRAME_AUDIO],
        video_frames=counts[FRAME_VIDEO],
        wall_ms=wall * 1e3,
        error=error,
    )
