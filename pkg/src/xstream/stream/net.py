"""TCP transport speaking the XSTR framing.

Request protocol: the client sends its queries as ordinary text/audio
frames, then one control START frame whose arg is the number of segments
requested. The server answers with a full session stream (control START,
data frames, control END) and closes the connection. One session per
connection; a dying client never disturbs later sessions.

The environment variable XSTREAM_SEED, when set, overrides the session
seed on the server.
"""

from __future__ import annotations

import os
import socket
import threading

from ..errors import ProtocolError, StateError
from .frames import (
    CONTROL_START,
    FRAME_AUDIO,
    FRAME_CONTROL,
    FRAME_TEXT,
    FrameReader,
    audio_frame,
    control_frame,
    control_from_payload,
    encode_frame,
    ids_from_payload,
    text_frame,
)
from .pipeline import PipelineConfig, run_session

_BACKLOG = 4


def _read_request(reader: FrameReader) -> tuple[list, int]:
    """Collect query frames up to the control START; returns (queries, segments)."""
    queries = []
    while True:
        frame = reader.next_frame()
        if frame is None:
            raise ProtocolError("connection closed before control START", 0)
        if frame.type == FRAME_CONTROL:
            code, arg, _ = control_from_payload(frame.payload)
            if code != CONTROL_START:
                raise ProtocolError(f"expected control START, got code {code}", 0)
            return queries, arg
        if frame.type == FRAME_TEXT:
            queries.append(("text", ids_from_payload(frame.payload)))
        elif frame.type == FRAME_AUDIO:
            queries.append(("audio", ids_from_payload(frame.payload)))
        else:
            raise ProtocolError(f"frame type {frame.type} not allowed in a request", 0)


def serve(host: str, port: int, *, thinker, model, sched, identity,
          pipeline: PipelineConfig | None = None, max_sessions: int | None = None,
          ready: threading.Event | None = None) -> int:
    """Serve sessions until max_sessions connections have been handled.

    Returns the bound port (useful with port 0). Client disconnects and
    per-session errors are contained; the listener keeps accepting.
    """
    cfg = pipeline or PipelineConfig()
    env_seed = os.environ.get("XSTREAM_SEED")
    if env_seed is not None:
        try:
            cfg = PipelineConfig(cfg.queue_capacity, cfg.frame_capacity,
                                 cfg.pacing, int(env_seed))
        except ValueError:
            raise StateError(f"XSTREAM_SEED is not an integer: {env_seed!r}") from None

    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(_BACKLOG)
        bound = srv.getsockname()[1]
        if ready is not None:
            ready.port = bound  # type: ignore[attr-defined]
            ready.set()
        served = 0
        while max_sessions is None or served < max_sessions:
            conn, _addr = srv.accept()
            served += 1
            try:
                with conn:
                    reader = FrameReader(conn.recv)
                    queries, segments = _read_request(reader)
                    frames = run_session(queries, identity, thinker=thinker,
                                         model=model, sched=sched,
                                         segments=segments, pipeline=cfg)
                    try:
                        for frame in frames:
                            conn.sendall(encode_frame(frame))
                    finally:
                        frames.close()
            except (ConnectionError, ProtocolError, StateError, OSError):
                # one bad or vanished client must not take the server down
                continue
        return bound


def connect_and_stream(host: str, port: int, queries, segments: int,
                       timeout: float = 30.0):
    """Send a request and yield the response frames as they arrive.

    queries: list of (modality, token ids). Malformed response bytes raise
    ProtocolError carrying the stream offset.
    """
    with socket.create_connection((host, port), timeout=timeout) as sock:
        for modality, tokens in queries:
            make = text_frame if modality == "text" else audio_frame
            sock.sendall(encode_frame(make(0, tokens)))
        sock.sendall(encode_frame(control_frame(CONTROL_START, arg=segments)))
        reader = FrameReader(sock.recv)
        while True:
            frame = reader.next_frame()
            if frame is None:
                return
            yield frame
