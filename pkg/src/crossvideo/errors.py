"""Exception types shared across the package."""


class CrossVideoError(Exception):
    """Base class for all package errors."""


class ValidationError(CrossVideoError, ValueError):
    """Bad input: an argument, config key or file violates its contract."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DatasetError(CrossVideoError, IOError):
    """A dataset on disk is missing, incomplete or corrupt."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class CheckpointError(CrossVideoError, IOError):
    """A checkpoint file is corrupt, truncated or has the wrong version."""


class NumericalError(CrossVideoError, ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, term=None, batch_id=None):
        super().__init__(message)
        self.term = term
        self.batch_id = batch_id
