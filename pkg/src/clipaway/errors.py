"""Exception taxonomy shared by every clipaway module."""


class ClipawayError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatchError(ClipawayError):
    """Vector spaces or layer widths do not line up."""


class DegenerateEmbeddingError(ClipawayError):
    """An embedding has (near-)zero norm where a direction is required."""


class DegenerateForegroundError(DegenerateEmbeddingError):
    """The foreground embedding cannot define a rejection direction."""


class NonFiniteParametersError(ClipawayError):
    """Adapter parameters contain NaN or Inf."""


class NonFiniteLossError(ClipawayError):
    """Training loss became NaN/Inf; the run is aborted."""


class NonFiniteLatentError(ClipawayError):
    """A diffusion backend produced non-finite latents."""


class EncoderSpaceMismatchError(ClipawayError):
    """An encoder emits a different space than the caller requires."""


class FormatVersionMismatchError(ClipawayError):
    """A serialized artifact has an unknown or unreadable format."""


class LayerShapeMismatchError(ClipawayError):
    """A checkpoint's layer-width table differs from the expected one."""


class WeightsNotLoadedError(ClipawayError):
    """Model weights are missing, corrupt, or not yet loaded."""


class ImageDecodeError(ClipawayError):
    """An image or alpha map is malformed or has mismatched shape."""


class BackendUnavailableError(ClipawayError):
    """The requested diffusion backend cannot be constructed."""


class BackendMismatchError(ClipawayError):
    """An operation specific to one backend was invoked for another."""


class OutOfMemoryError(ClipawayError):
    """A generation ran out of memory; carries the attempted resolution."""


class ConfigError(ClipawayError):
    """The toolkit configuration is invalid or references bad files."""


class EmptyMaskWarning(UserWarning):
    """A mask with zero foreground pixels was processed anyway."""
