"""Interleaved segment layout and the shared text/audio/video timeline.

A conversational stream is a sequence of segments, each laid out as a text
block, then an audio block, then a run of video latent chunks. All three
modalities are aligned on one real-valued temporal axis measured in latent
frames, where one video chunk advances the clock by exactly 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple

from .errors import ConfigError


@dataclass(frozen=True)
class SegmentConfig:
    """Static layout of one multimodal segment.

    The defaults describe the deployed configuration: 13 text tokens, 26
    speech tokens at 12.5 Hz, and 6 latent video chunks of 8 raw frames
    each at 25 fps over a 256x256 canvas compressed 8x in time and 32x in
    space.
    """

    text_tokens_per_segment: int = 13
    audio_tokens_per_segment: int = 26
    video_chunks_per_segment: int = 6
    audio_rate: float = 12.5
    fps: float = 25.0
    temporal_compression: int = 8
    spatial_compression: int = 32
    height: int = 256
    width: int = 256
    latent_channels: int = 8

    def __post_init__(self):
        for name in ("text_tokens_per_segment", "audio_tokens_per_segment",
                     "video_chunks_per_segment", "latent_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.audio_rate <= 0 or self.fps <= 0:
            raise ConfigError("audio_rate and fps must be positive")
        if self.temporal_compression < 1 or self.spatial_compression < 1:
            raise ConfigError("compression ratios must be >= 1")
        if self.height % self.spatial_compression or self.width % self.spatial_compression:
            raise ConfigError(
                f"height/width ({self.height}x{self.width}) must be divisible "
                f"by spatial_compression {self.spatial_compression}")
        if self.temporal_compression / self.fps <= 0:
            raise ConfigError("chunk duration must be positive")

    @property
    def grid_height(self) -> int:
        return self.height // self.spatial_compression

    @property
    def grid_width(self) -> int:
        return self.width // self.spatial_compression

    @property
    def tokens_per_video_chunk(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def chunk_seconds(self) -> float:
        return self.temporal_compression / self.fps

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SegmentConfig":
        """Build from string-keyed values, rejecting unknown keys."""
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown segment config key {key!r}")
            try:
                if key in ("audio_rate", "fps"):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = int(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "SegmentConfig":
        """Load the seg.* namespace of a `key = value` config file."""
        return cls.from_mapping(config_section(load_config_file(path), "seg"))


def load_config_file(path) -> dict[str, str]:
    """Parse a UTF-8 config file of `key = value` lines into a flat dict.

    Blank lines and lines starting with `#` are skipped. Keys are dotted
    (namespace.field). Values stay strings; each consumer coerces its own.
    """
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def config_section(cfg: dict[str, str], namespace: str) -> dict[str, str]:
    """Extract `namespace.field` keys, returning a mapping of bare fields."""
    prefix = namespace + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


class Slot(NamedTuple):
    modality: str  # "text" | "audio" | "video"
    token_count: int
    chunk_index: int | None  # local chunk ordinal for video slots


@dataclass(frozen=True)
class SegmentPlan:
    """Ordered slot layout of one segment."""

    segment_index: int
    slots: tuple[Slot, ...]
    tokens_per_video_chunk: int

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.slots)


@dataclass(frozen=True, order=True)
class TimelinePos:
    """Real-valued position on the shared temporal axis, in latent frames."""

    time_index: float = field(default=0.0)

    def __float__(self) -> float:
        return self.time_index


def build_segment_plan(cfg: SegmentConfig, segment_index: int) -> SegmentPlan:
    """Slot layout: [text block][audio block][video chunk 0..V-1]."""
    if segment_index < 0:
        raise ConfigError("segment_index must be >= 0")
    slots = [
        Slot("text", cfg.text_tokens_per_segment, None),
        Slot("audio", cfg.audio_tokens_per_segment, None),
    ]
    for c in range(cfg.video_chunks_per_segment):
        slots.append(Slot("video", cfg.tokens_per_video_chunk, c))
    return SegmentPlan(segment_index, tuple(slots), cfg.tokens_per_video_chunk)


def segment_token_count(cfg: SegmentConfig) -> int:
    return (cfg.text_tokens_per_segment + cfg.audio_tokens_per_segment
            + cfg.video_chunks_per_segment * cfg.tokens_per_video_chunk)


def audio_token_time(cfg: SegmentConfig, global_audio_index: int) -> TimelinePos:
    """Latent-frame time of an audio token; one token = fps/(rate*tc) frames."""
    if global_audio_index < 0:
        raise ConfigError("audio index must be >= 0")
    t = global_audio_index * cfg.fps / (cfg.audio_rate * cfg.temporal_compression)
    return TimelinePos(t)


def video_chunk_time(cfg: SegmentConfig, global_chunk_index: int) -> TimelinePos:
    """One latent frame per chunk, so the time axis counts chunks directly."""
    if global_chunk_index < 0:
        raise ConfigError("chunk index must be >= 0")
    return TimelinePos(float(global_chunk_index))


def text_token_time(cfg: SegmentConfig, segment_index: int, token_index: int) -> TimelinePos:
    """Text tokens share the audio block's span, spread evenly across it.

    The j-th of T text tokens in segment s sits at block_start + j*(span/T)
    where span is the audio block's extent in latent frames.
    """
    if segment_index < 0 or token_index < 0:
        raise ConfigError("segment and token indices must be >= 0")
    if token_index >= cfg.text_tokens_per_segment:
        raise ConfigError(f"text token index {token_index} out of range")
    span = (cfg.audio_tokens_per_segment * cfg.fps
            / (cfg.audio_rate * cfg.temporal_compression))
    start = segment_index * span
    return TimelinePos(start + token_index * span / cfg.text_tokens_per_segment)


def segment_durations(cfg: SegmentConfig) -> tuple[float, float]:
    """(audio_seconds, video_seconds) spanned by one segment.

    These intentionally disagree under the defaults (2.08 s vs 1.92 s);
    the stream layer exposes both rather than resampling either modality.
    """
    audio = cfg.audio_tokens_per_segment / cfg.audio_rate
    video = cfg.video_chunks_per_segment * cfg.temporal_compression / cfg.fps
    return audio, video
