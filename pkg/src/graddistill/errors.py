"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class GradDistillError(Exception):
    """Base class for package errors."""


class ConfigError(GradDistillError):
    """Invalid configuration value or unusable combination of settings."""


class DataError(GradDistillError):
    """Malformed dataset, vocabulary, or artifact file."""


class TrainingDivergedError(GradDistillError):
    """Training produced a non-finite loss; checkpoint is not written."""
