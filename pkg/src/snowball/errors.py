"""Exception hierarchy shared by every module of the toolkit."""


class SnowballError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(SnowballError, ValueError):
    """An argument is outside its documented domain."""


class InvalidChannelError(ParameterError):
    pass


class InvalidInputError(ParameterError):
    pass


class EmptyMaskError(SnowballError):
    """No perturbable pixel / no foreground contour exists."""


class PlacementOutOfBoundsError(ParameterError):
    pass


class ModelFormatError(SnowballError):
    """Weights file or layer chain is malformed."""


class BadMagicError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class OracleError(SnowballError):
    """Classifier oracle failure."""


class TransportError(OracleError):
    """Network-level failure talking to a remote classifier; retryable."""


class ProtocolError(OracleError):
    """Remote classifier answered with something that violates the protocol."""


class CandidateEvaluationError(SnowballError):
    """An oracle error raised while scoring one placement."""

    def __init__(self, placement, cause):
        super().__init__(f"evaluation failed at {placement}: {cause}")
        self.placement = placement
        self.cause = cause


class NoFeasiblePlacementError(SnowballError):
    pass


class BaselineMisclassifiedError(SnowballError):
    """The clean sign is not classified as its true label; nothing to attack."""


class ConfigError(SnowballError, ValueError):
    pass


class ManifestError(ConfigError):
    pass


class InvalidVerdictError(OracleError, ValueError):
    """A verdict violates its own invariants (distribution, argmax, range)."""
