"""Exception types shared across the package.

Every error raised on a user-facing path derives from DncError so the CLI
can map failures onto stable exit codes.
"""


class DncError(Exception):
    """Base class for all package errors."""


class ConfigError(DncError):
    """Invalid or inconsistent configuration values."""


class FormatError(DncError):
    """Malformed on-disk artifact (dataset, checkpoint, cluster model)."""


class PrerequisiteError(DncError):
    """A required input artifact is missing or belongs to a different run."""


class NumericError(DncError):
    """Non-finite values or numerically impossible inputs."""
