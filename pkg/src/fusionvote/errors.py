"""Exception hierarchy shared by every fusionvote module."""


class FusionVoteError(Exception):
    """Base class for all library errors."""


class DimensionError(FusionVoteError, ValueError):
    """Shapes of the operands are incompatible."""


class ConfigurationError(FusionVoteError, ValueError):
    """A constructor or config value is invalid."""


class ContractError(FusionVoteError, ValueError):
    """A precondition of an operation was violated by the caller."""


class StateError(FusionVoteError, RuntimeError):
    """The object is not in a state that allows the requested operation."""


class NumericError(FusionVoteError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParseError(FusionVoteError, ValueError):
    """Malformed file contents.

    Attributes:
        offset: byte offset in the file where parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(FusionVoteError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointTensorCountError(CheckpointError):
    pass


class CheckpointConfigMismatchError(CheckpointError):
    pass


class InvariantViolation(FusionVoteError, RuntimeError):
    """An internal consistency check failed; indicates a library bug."""
