"""Exception hierarchy shared across the package."""


class CiderError(Exception):
    """Base class for all package errors."""


class ParseError(CiderError):
    """Malformed input record; carries the offending file and line number."""

    def __init__(self, path, line_number, message):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class DataError(CiderError):
    """Dataset-level failure (empty domain, infeasible negative pool, ...)."""


class ConfigError(CiderError):
    """Invalid configuration value or combination."""


class ContractError(CiderError):
    """Caller violated an operation precondition (shape/key mismatch)."""


class NumericError(CiderError):
    """Non-finite value produced; names the component that produced it."""


class TrainingDiverged(CiderError):
    """Loss exploded or went non-finite during training."""

    def __init__(self, message, epoch=None, step=None, breakdown=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.breakdown = breakdown
