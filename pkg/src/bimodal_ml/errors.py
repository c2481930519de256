"""Exception types shared across the package."""

from __future__ import annotations

__all__ = [
    "InvalidConfigError",
    "InvalidInputError",
    "ManifestError",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "ValidationError",
]


class InvalidInputError(ValueError):
    """A runtime input (tensor, label, shape) violates an operation contract."""


class InvalidConfigError(ValueError):
    """A configuration value or parameter shape violates its invariants."""


class ValidationError(ValueError):
    """Data fails a semantic check (label range, mapping domain, empty set)."""


class ManifestError(ValueError):
    """A manifest file is malformed.  Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedMetricError(ValueError):
    """A metric has no defined value on this input (e.g. AP with no positives)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss.  Carries diagnostics for the log."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
