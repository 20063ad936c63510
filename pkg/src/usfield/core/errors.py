"""Exception hierarchy shared across the package."""


class UsfieldError(Exception):
    """Base class for all package errors."""


class ValidationError(UsfieldError, ValueError):
    """A value violates a documented invariant."""


class LoadError(UsfieldError):
    """A required file is missing or unreadable.

    Attributes:
        path: the offending file.
    """

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class CheckpointError(UsfieldError):
    """Checkpoint container is corrupt, truncated or from another format version."""


class ConfigError(ValidationError):
    """Unknown or malformed configuration key.

    Attributes:
        key: the offending key, when one can be named.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class TrainingDivergedError(UsfieldError):
    """Raised when a loss becomes non-finite during optimisation."""

    def __init__(self, message: str, step: int, diagnostics: dict | None = None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}
