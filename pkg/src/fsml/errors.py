"""Exception taxonomy.

Every failure the library raises deliberately is one of these, so callers can
tell a bad config from a bad file from a broken caller contract.
"""


class FsmlError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FsmlError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(FsmlError):
    """A config value or combination of values is invalid."""


class ContractError(FsmlError):
    """A caller violated a documented precondition."""


class FormatError(FsmlError):
    """A binary file is malformed.  Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SamplingError(FsmlError):
    """A sampling request cannot be satisfied by the available data."""


class ConditioningError(FsmlError):
    """A linear system is singular or too ill-conditioned to solve."""


class CheckpointError(FsmlError):
    """A checkpoint does not match the network it is being loaded into."""
