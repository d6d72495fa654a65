"""Interleaved text/audio/video token streaming with chunk-wise video diffusion.

A desk-scale engine: a frozen conversational "thinker" emits interleaved text
and speech tokens whose hidden states condition an autoregressive video
"actor" that denoises latent chunks through a staggered pyramid schedule,
while the stream layer frames everything onto a wire protocol under realtime
pacing and bounded queues.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    GradCheckError,
    InputError,
    MaskError,
    ProtocolError,
    ShapeError,
    StateError,
    StepError,
    TruncationError,
    XStreamError,
)

__all__ = [
    "__version__",
    "XStreamError", "ConfigError", "ShapeError", "StepError", "MaskError",
    "StateError", "InputError", "GradCheckError", "ProtocolError",
    "TruncationError",
]
