"""
Exception types shared by the core modules and the command line.
"""
from typing import Optional


class CcnnError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(CcnnError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(CcnnError, ValueError):
    """A file does not match its declared format."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptySplitError(CcnnError, ValueError):
    """A split or dataset has no samples to work with."""


class InvalidStateError(CcnnError, RuntimeError):
    """An object was used out of sequence (e.g. a stale forward cache)."""


class NonFiniteError(CcnnError, ArithmeticError):
    """A loss or gradient became NaN or infinite."""

    def __init__(self, message: str, epoch: Optional[int] = None,
                 batch: Optional[int] = None, group: Optional[str] = None):
        details = [f"{k}={v}" for k, v in (("epoch", epoch), ("batch", batch), ("group", group))
                   if v is not None]
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))
        self.epoch = epoch
        self.batch = batch
        self.group = group


class ConfigError(CcnnError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, flag: str, message: str):
        super().__init__(f"{flag}: {message}")
        self.flag = flag
