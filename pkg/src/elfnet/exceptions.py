"""Exception hierarchy shared across the package."""


class ElfError(Exception):
    """Base class for all package errors."""


class DimensionError(ElfError, ValueError):
    """Tensor shapes do not agree for the requested operation."""


class ConfigurationError(ElfError, ValueError):
    """A structural setting (stride plan, exit count, thresholds) is invalid."""


class StateError(ElfError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(ElfError, ValueError):
    """A serialized file is malformed; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalAbort(ElfError, FloatingPointError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, epoch: int, batch: int, lr: float):
        super().__init__(f"{message} (epoch {epoch}, batch {batch}, lr {lr:g})")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
