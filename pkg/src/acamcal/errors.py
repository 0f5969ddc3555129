"""Exception types raised by acamcal."""

from __future__ import annotations


class CalibrationError(Exception):
    """Base class for all acamcal domain errors."""


class DegenerateGeometryError(CalibrationError):
    """A sound source coincides with a microphone (distance below 1e-12 m)."""


class UnderdeterminedProblemError(CalibrationError):
    """Too few measurements (or microphones) to identify all positions."""


class IllConditionedError(CalibrationError):
    """Normal-equation matrix is not solvable even after damping."""


class DivergenceError(CalibrationError):
    """Iteration produced a non-finite residual.

    Carries the step-norm trace accumulated before the failure.
    """

    def __init__(self, message: str, step_norm_trace: list[float] | None = None):
        super().__init__(message)
        self.step_norm_trace = list(step_norm_trace or [])


class NoSignalError(CalibrationError):
    """Cross-correlation input has no usable spectral content."""


class AmbiguousPeakError(CalibrationError):
    """Correlation peak sits on the lag-window boundary."""


class ExtractionError(CalibrationError):
    """One or more emission windows failed TDOA extraction.

    ``failures`` lists ``(window_index, pair, message)`` tuples; ``partial``
    holds the measurements of the windows that did succeed (may be None when
    every window failed).
    """

    def __init__(self, message: str, failures=None, partial=None):
        super().__init__(message)
        self.failures = list(failures or [])
        self.partial = partial
