"""
Exceptions raised by moescope. Library code raises these; only the command
line entry point turns them into exit codes.
"""


class MoescopeError(Exception):
    """Base class for every error moescope raises on purpose"""


class DimensionError(MoescopeError):
    """Raised when tensor shapes do not line up"""

    def __init__(self, message, *shapes):
        if shapes:
            message = (
                f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
            )
        super().__init__(message)
        self.shapes = shapes


class NumericError(MoescopeError):
    """Raised on NaN inputs or when a loss stops being finite"""


class ContractError(MoescopeError):
    """Raised when a caller breaks a documented precondition"""


class ConfigError(MoescopeError):
    """Raised for invalid or inconsistent configuration"""


class DecodeError(MoescopeError):
    """Raised when token ids, checkpoints or trace files cannot be read"""


class SkipExample(MoescopeError):
    """Raised when a sequence is too short for the requested objective.
    Samplers catch it and draw again."""
