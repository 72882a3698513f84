"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Incompatible widths, unknown keys or out-of-range settings."""


class InputError(ValueError):
    """Malformed data handed to an operation (empty strings, overlength sequences, ...)."""


class TransportError(RuntimeError):
    """A remote client failed in a way that is worth retrying."""


class TrainingAborted(RuntimeError):
    """Raised when a training run hits a non-finite loss or a frozen-weight drift."""

    def __init__(self, message, *, step=None, term=None):
        super().__init__(message)
        self.step = step
        self.term = term
