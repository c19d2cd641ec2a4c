"""Exception hierarchy shared by all modules."""


class SemiSegError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SemiSegError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class InvalidLabelError(InvalidInputError):
    pass


class ContractError(SemiSegError, ValueError):
    """Arguments violate an operation's precondition (shapes, pairing, ranges)."""


class GeometryError(SemiSegError, ValueError):
    """Volume/patch geometry that cannot be planned or processed."""


class ConfigurationError(SemiSegError, ValueError):
    pass


class DegenerateInputError(SemiSegError, ValueError):
    pass


class PreprocessingError(SemiSegError, RuntimeError):
    pass


class UndefinedMetricError(SemiSegError, ValueError):
    """Metric has no value for the given masks (e.g. ASD of an empty mask)."""


class TrainingDivergedError(SemiSegError, RuntimeError):
    """A loss became non-finite; ``snapshot`` carries the offending step's values."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
