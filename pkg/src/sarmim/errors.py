"""Exception types shared across the package."""


class SarMimError(Exception):
    """Base class for all package errors."""


class ValidationError(SarMimError):
    """Invalid configuration, arguments, or input data. CLI exit code 1."""


class DivergenceError(SarMimError):
    """Non-finite values encountered during optimization. CLI exit code 2."""
