"""Exception hierarchy shared across the package."""

from __future__ import annotations


class EEGLeakError(Exception):
    """Base class for all package errors."""


class ConfigError(EEGLeakError, ValueError):
    """Invalid configuration value.  ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CohortFileError(EEGLeakError):
    """Base for cohort ingestion failures."""


class MissingCohortFileError(CohortFileError, FileNotFoundError):
    pass


class MalformedManifestError(CohortFileError, ValueError):
    pass


class DuplicatePatientError(CohortFileError, ValueError):
    pass


class ChannelLengthError(CohortFileError, ValueError):
    pass


class ShapeError(EEGLeakError, ValueError):
    pass


class NumericGuardError(EEGLeakError, FloatingPointError):
    pass


class DivergenceError(EEGLeakError, FloatingPointError):
    pass


class LeakageRefusal(EEGLeakError):
    """Raised when a training stage is asked to run on a leaky wiring."""

    def __init__(self, report):
        self.report = report
        kinds = ", ".join(sorted({v.kind for v in report.violations}))
        super().__init__(
            f"refusing to train: {len(report.violations)} leakage violation(s) "
            f"[{kinds}]; pass --allow-leaky to override"
        )


class DegenerateCohortError(EEGLeakError, ValueError):
    pass


class StageError(EEGLeakError):
    """Wraps an exception raised inside a pipeline stage with the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
