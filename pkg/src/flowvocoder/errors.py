class FlowVocoderError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FlowVocoderError, ValueError):
    """Shapes, hyperparameters or weights do not fit together."""


class InputError(FlowVocoderError, ValueError):
    """Caller-supplied data is malformed (non-finite, empty, wrong length)."""


class NumericFailure(FlowVocoderError, ArithmeticError):
    """A numerical routine produced NaN/Inf or failed to converge.

    ``where`` names the primitive or the coordinates at which it happened.
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} [{where}]")
        self.where = where
