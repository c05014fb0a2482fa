class InvalidInputError(ValueError):
    """Raised when a tensor or argument violates a shape/value contract."""


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    """A loss or activation became non-finite.

    ``components`` carries the per-term loss values at the time of failure.
    """

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})
