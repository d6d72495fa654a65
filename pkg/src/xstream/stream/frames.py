"""Binary frame format for interleaved session streams ("XSTR").

Every frame is a fixed 16-byte header followed by an opaque payload:

    magic "XSTR" | version u8 | type u8 | segment_id u32 | chunk_index u16
    | payload_len u32 | payload

All integers little-endian. Text and audio payloads are u16 token ids;
video payloads are raw 32-bit floats (tokens x channels, row major);
control payloads are code u8, arg u32, message length u16, UTF-8 message.
The format is self-synchronizing at frame boundaries: decoding a valid
concatenation consumes it frame by frame with no resync heuristics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError, ShapeError

MAGIC = b"XSTR"
VERSION = 1
HEADER_LEN = 16
_HEADER = struct.Struct("<4sBBIHI")

FRAME_TEXT = 0
FRAME_AUDIO = 1
FRAME_VIDEO = 2
FRAME_CONTROL = 3
_FRAME_TYPES = (FRAME_TEXT, FRAME_AUDIO, FRAME_VIDEO, FRAME_CONTROL)

CONTROL_START = 0
CONTROL_END = 1
CONTROL_ERROR = 2


@dataclass(frozen=True)
class StreamFrame:
    type: int
    segment_id: int
    chunk_index: int
    payload: bytes

    def __post_init__(self):
        if self.type not in _FRAME_TYPES:
            raise ShapeError(f"unknown frame type {self.type}")
        if not 0 <= self.segment_id < 2 ** 32:
            raise ShapeError("segment_id out of u32 range")
        if not 0 <= self.chunk_index < 2 ** 16:
            raise ShapeError("chunk_index out of u16 range")


def encode_frame(frame: StreamFrame) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, frame.type, frame.segment_id,
                        frame.chunk_index, len(frame.payload)) + frame.payload


def decode_frame(buf: bytes, offset: int = 0) -> tuple[StreamFrame, int]:
    """Decode one frame at `offset`; returns (frame, offset past it)."""
    if len(buf) - offset < HEADER_LEN:
        raise ProtocolError(
            f"truncated header: {len(buf) - offset} of {HEADER_LEN} bytes",
            offset)
    magic, version, ftype, segment_id, chunk_index, plen = _HEADER.unpack_from(
        buf, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", offset)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", offset + 4)
    if ftype not in _FRAME_TYPES:
        raise ProtocolError(f"unknown frame type {ftype}", offset + 5)
    body = offset + HEADER_LEN
    if len(buf) - body < plen:
        raise ProtocolError(
            f"truncated payload: {len(buf) - body} of {plen} bytes", body)
    payload = bytes(buf[body:body + plen])
    return StreamFrame(ftype, segment_id, chunk_index, payload), body + plen


def decode_stream(buf: bytes) -> list[StreamFrame]:
    """Decode a concatenation of frames; the buffer must end on a boundary."""
    frames = []
    offset = 0
    while offset < len(buf):
        frame, offset = decode_frame(buf, offset)
        frames.append(frame)
    return frames


# -- typed constructors / payload views ---------------------------------------

def _ids_payload(ids) -> bytes:
    arr = np.asarray(ids)
    if arr.ndim != 1:
        raise ShapeError("token ids must be one-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() >= 2 ** 16):
        raise ShapeError("token ids out of u16 range")
    return arr.astype("<u2").tobytes()


def text_frame(segment_id: int, ids) -> StreamFrame:
    return StreamFrame(FRAME_TEXT, segment_id, 0, _ids_payload(ids))


def audio_frame(segment_id: int, ids) -> StreamFrame:
    return StreamFrame(FRAME_AUDIO, segment_id, 0, _ids_payload(ids))


def video_frame(segment_id: int, chunk_index: int, latents: np.ndarray
                ) -> StreamFrame:
    arr = np.asarray(latents)
    if arr.ndim != 2:
        raise ShapeError("video latents must be (tokens, channels)")
    return StreamFrame(FRAME_VIDEO, segment_id, chunk_index,
                       arr.astype("<f4").tobytes())


def control_frame(code: int, arg: int = 0, message: str = "") -> StreamFrame:
    msg = message.encode("utf-8")
    payload = struct.pack("<BIH", code, arg, len(msg)) + msg
    return StreamFrame(FRAME_CONTROL, 0, 0, payload)


def ids_from_payload(payload: bytes) -> np.ndarray:
    if len(payload) % 2:
        raise ProtocolError("odd id payload length", len(payload) - 1)
    return np.frombuffer(payload, dtype="<u2").astype(np.int64)


def latents_from_payload(payload: bytes, tokens: int, channels: int
                         ) -> np.ndarray:
    want = tokens * channels * 4
    if len(payload) != want:
        raise ProtocolError(
            f"video payload is {len(payload)} bytes, expected {want}", 0)
    return np.frombuffer(payload, dtype="<f4").reshape(tokens, channels).copy()


def control_from_payload(payload: bytes) -> tuple[int, int, str]:
    if len(payload) < 7:
        raise ProtocolError("control payload shorter than 7 bytes", len(payload))
    code, arg, mlen = struct.unpack_from("<BIH", payload, 0)
    if len(payload) != 7 + mlen:
        raise ProtocolError("control message length mismatch", 7)
    return code, arg, payload[7:].decode("utf-8")


class FrameReader:
    """Incremental decoder over a byte-chunk source (e.g. socket recv)."""

    def __init__(self, read):
        """read(n) must return up to n bytes, b"" on a closed source."""
        self._read = read
        self._buf = bytearray()
        self._consumed = 0  # absolute offset of buf[0] in the stream

    def _fill(self, need: int) -> bool:
        while len(self._buf) < need:
            data = self._read(need - len(self._buf))
            if not data:
                return False
            self._buf.extend(data)
        return True

    def next_frame(self) -> StreamFrame | None:
        """Next frame, or None on clean end-of-stream at a boundary."""
        if not self._fill(HEADER_LEN):
            if self._buf:
                raise ProtocolError(
                    f"stream ended mid-header ({len(self._buf)} bytes)",
                    self._consumed)
            return None
        plen = int.from_bytes(self._buf[12:16], "little")
        if not self._fill(HEADER_LEN + plen):
            raise ProtocolError("stream ended mid-payload",
                                self._consumed + HEADER_LEN)
        # decode_frame re-validates magic/version/type with absolute offsets
        shifted = bytes(self._buf[:HEADER_LEN + plen])
        try:
            frame, _ = decode_frame(shifted, 0)
        except ProtocolError as err:
            raise ProtocolError(str(err).rsplit(" (at byte", 1)[0],
                                self._consumed + err.offset) from None
        del self._buf[:HEADER_LEN + plen]
        self._consumed += HEADER_LEN + plen
        return frame
