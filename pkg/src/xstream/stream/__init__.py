"""Wire framing, dual-worker pipeline, and TCP transport for live sessions."""

from .frames import (
    CONTROL_END,
    CONTROL_ERROR,
    CONTROL_START,
    FRAME_AUDIO,
    FRAME_CONTROL,
    FRAME_TEXT,
    FRAME_VIDEO,
    HEADER_LEN,
    FrameReader,
    StreamFrame,
    audio_frame,
    control_frame,
    control_from_payload,
    decode_frame,
    decode_stream,
    encode_frame,
    ids_from_payload,
    latents_from_payload,
    text_frame,
    video_frame,
)
from .pipeline import (
    LatencyReport,
    PipelineConfig,
    measure_latency,
    run_session,
)
from .net import connect_and_stream, serve

__all__ = [
    "StreamFrame", "FrameReader", "encode_frame", "decode_frame",
    "decode_stream", "text_frame", "audio_frame", "video_frame",
    "control_frame", "control_from_payload", "ids_from_payload",
    "latents_from_payload", "HEADER_LEN",
    "FRAME_TEXT", "FRAME_AUDIO", "FRAME_VIDEO", "FRAME_CONTROL",
    "CONTROL_START", "CONTROL_END", "CONTROL_ERROR",
    "PipelineConfig", "run_session", "measure_latency", "LatencyReport",
    "serve", "connect_and_stream",
]
