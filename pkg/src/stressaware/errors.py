"""Exception hierarchy shared by all stressaware modules."""


class StressAwareError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(StressAwareError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateRangeError(ParameterError):
    """Min-max fitting saw a constant signal (max == min); likely a dead sensor."""


class InsufficientBeatsError(StressAwareError, ValueError):
    """Too few detected beats / NN intervals for the requested computation."""


class EncodingError(StressAwareError, ValueError):
    """A categorical context field carries a code outside its code table."""


class DegenerateTrainingError(StressAwareError, ValueError):
    """Training data contains a single class."""


class StratificationError(StressAwareError, ValueError):
    """Requested fold count exceeds what the minority class supports."""


class UndefinedAucError(StressAwareError, ValueError):
    """ROC-AUC requested for labels containing a single class."""


class CompatibilityError(StressAwareError):
    """Model/agent artifact does not match the data or architecture offered."""


class CorruptedModelError(StressAwareError):
    """Model parameters are non-finite or an artifact failed its checksum."""


class NotReadyError(StressAwareError):
    """Operation invoked before its warm-up precondition was met."""


class DatasetFormatError(StressAwareError, ValueError):
    """A dataset file is malformed; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class MigrationError(StressAwareError):
    """A file declares a schema/format version this build does not support."""


class ExperimentError(StressAwareError):
    """An experiment cannot proceed (e.g. not enough labels for the held-out split)."""
