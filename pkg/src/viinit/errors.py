"""Exception hierarchy shared by all modules."""


class ViInitError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(ViInitError, ValueError):
    pass


class ConfigError(ViInitError, ValueError):
    pass


class DataError(ViInitError):
    """Problems with input data: parse failures, validation, insufficient data."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ValidationError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class BehindCameraError(InvalidArgumentError):
    pass


class DegenerateDisparityError(InvalidArgumentError):
    pass


class InvalidMeasurementError(DataError):
    pass


class InconsistentIntervalError(DataError):
    pass


class ImuGapError(DataError):
    pass


class NotEnoughVisualDataError(DataError):
    pass


class NumericalFailure(ViInitError):
    pass


class StageError(ViInitError):
    """A pipeline step failed; ``stage`` names it and ``partial`` holds what was computed."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial
