"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or tag is invalid or unknown."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class IntegrityError(RuntimeError):
    """A dataset or checkpoint on disk is malformed."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
