"""Exception hierarchy shared by every gmvae module."""


class GMVAEError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GMVAEError, ValueError):
    """Operand shapes do not conform."""


class DomainError(GMVAEError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(GMVAEError, ValueError):
    """A documented precondition of a call was violated."""


class BoundsError(GMVAEError, IndexError):
    """An index lies outside its valid range."""


class ConfigError(GMVAEError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""


class ParseError(GMVAEError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(GMVAEError, ValueError):
    """A checkpoint is unreadable or does not match the requested model."""
