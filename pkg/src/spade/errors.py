"""Exception hierarchy.

Every error raised by the library derives from :class:`SpadeError`. The CLI
maps the three broad families onto exit codes (config 2, data 3, numerical 4).
"""


class SpadeError(Exception):
    exit_code = 1


class ConfigError(SpadeError, ValueError):
    """Bad parameter or configuration value."""

    exit_code = 2


ParameterError = ConfigError


class DataError(SpadeError):
    exit_code = 3


class GeometryError(DataError):
    """Singular transform, empty overlap and similar geometric failures."""


class OutOfFieldError(GeometryError):
    pass


class DegenerateInputError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class ValidationError(DataError, ValueError):
    pass


class CohortError(DataError):
    pass


class AvailabilityError(DataError):
    def __init__(self, message, usable=None):
        super().__init__(message)
        self.usable = usable


class SamplingExhaustedError(DataError):
    pass


class NumericalError(SpadeError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, iteration=None, component=None):
        super().__init__(message)
        self.iteration = iteration
        self.component = component


class DegenerateEmbeddingError(DegenerateInputError):
    pass
