"""Exception types shared across the engine."""


class XStreamError(Exception):
    """Base class for all engine errors."""


class ConfigError(XStreamError):
    """Invalid configuration value or unknown configuration key."""


class ShapeError(XStreamError):
    """Tensor shape or dimension mismatch."""


class StepError(XStreamError):
    """Diffusion step index out of range or mis-ordered."""


class MaskError(XStreamError):
    """Degenerate attention mask (no tokens, or a query with no keys)."""


class StateError(XStreamError):
    """Operation issued against a session or cache in the wrong state."""


class InputError(XStreamError):
    """User-supplied tokens are out of vocabulary or of unknown modality."""


class GradCheckError(XStreamError):
    """Gradient check could not be evaluated (NaN gradient, bad eps)."""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class ProtocolError(XStreamError):
    """Malformed wire frame. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncationError(XStreamError):
    """Conditioning stream ended mid-segment; carries the last complete chunk."""

    def __init__(self, message: str, last_chunk_index: int):
        super().__init__(message)
        self.last_chunk_index = last_chunk_index
