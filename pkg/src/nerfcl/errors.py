"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class ProtocolError(RuntimeError):
    """An operation was called out of order (unregistered timestep, missing teacher, ...)."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed; carries the timestep index when known."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"timestep {step}: {message}")
        self.step = step


class DatasetError(OSError):
    """A dataset or manifest on disk is missing, malformed, or of an unknown version."""


class ConfigError(ValueError):
    """An experiment or scene configuration failed validation."""
