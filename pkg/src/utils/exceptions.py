"""Custom exceptions for dml-seq2seq."""


class DmlSeqError(Exception):
    """Base class for every error raised by the package."""
    pass


class ConfigError(DmlSeqError):
    """Exception raised when a configuration value violates its contract."""
    pass


class ContractError(DmlSeqError):
    """Exception raised when an operation's precondition does not hold."""
    pass


class DimensionError(ContractError):
    """Exception raised on tensor shape mismatches."""
    pass


class CapacityError(ContractError):
    """Exception raised when a sequence exceeds a fixed-size table."""
    pass


class InputTooShortError(ContractError):
    """Exception raised when a feature sequence is too short to subsample."""
    pass


class NumericError(DmlSeqError):
    """Exception raised when NaN or Inf shows up in a forward or backward pass."""
    pass


class CorpusParseError(DmlSeqError):
    """Exception raised when a corpus file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(DmlSeqError):
    """Exception raised when a checkpoint is missing or malformed."""
    pass
