"""Exception hierarchy shared by every module."""


class TLVCoreError(Exception):
    """Base class for all errors raised by tlvcore."""


class ConfigurationError(TLVCoreError, ValueError):
    pass


class DomainError(TLVCoreError, ValueError):
    pass


class ShapeError(TLVCoreError, ValueError):
    pass


class DegenerateInputError(TLVCoreError, ValueError):
    pass


class PreconditionError(TLVCoreError, ValueError):
    pass


class OracleInvalidError(TLVCoreError, RuntimeError):
    """The function handed to a gradient oracle is not deterministic."""


class CheckpointError(TLVCoreError, IOError):
    pass


class DatasetFormatError(TLVCoreError, IOError):
    pass


class TrainingDivergedError(TLVCoreError, RuntimeError):
    """A non-finite loss was produced; ``record`` holds the offending metrics."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
