"""Exception taxonomy.

Every error raised by this package derives from FedtreeError so callers can
catch the whole family.  The CLI maps subfamilies to exit codes: input and
validation problems exit 2, fit-time failures exit 3, envelope integrity and
version problems exit 4.
"""

from __future__ import annotations


class FedtreeError(Exception):
    """Base class for all package errors."""


class FormatError(FedtreeError):
    """Malformed external input: CSV layout, envelope text, truncation."""


class ValidationError(FedtreeError):
    """Well-formed input whose content violates a contract."""


class PositivityError(ValidationError):
    """A dataset or partition lacks the required treated/control rows."""


class SchemaError(ValidationError):
    """Feature matrix does not conform to a FeatureSchema."""


class ConfigError(ValidationError):
    """Invalid configuration value or combination."""


class ConsistencyError(ValidationError):
    """Objects from different fits or tables were mixed in one operation."""


class IoError(FedtreeError):
    """A file could not be read or written."""


class FitError(FedtreeError):
    """Model fitting failed (too few rows, degenerate design, ...)."""


class ConvergenceError(FitError):
    """Iterative fit did not reach tolerance; carries the last iterate."""

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SeparationError(FitError):
    """Logistic fit diverged, indicating (quasi-)separated classes."""


class DegenerateEstimandError(FitError):
    """An estimand is undefined on the given data (e.g. empty agreement set)."""


class IntegrityError(FedtreeError):
    """Envelope checksum mismatch: payload was altered after export."""


class VersionError(FedtreeError):
    """Envelope format version is not supported by this build."""
