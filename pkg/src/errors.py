"""
Error hierarchy for the semi-supervised cardiac phantom pipeline.

Every failure raised by the package derives from PipelineError so the
command-line entry point can map it to an exit code.
"""


class PipelineError(Exception):
    """Base class for all pipeline errors."""
    pass


class DimensionError(PipelineError, ValueError):
    """Raised when tensor or mask shapes do not match an operation's contract."""
    pass


class ParameterError(PipelineError, ValueError):
    """Raised when a numeric parameter is outside its valid range."""
    pass


class TargetIndexError(PipelineError, IndexError):
    """Raised when a class target lies outside [0, K)."""
    pass


class ContractError(PipelineError):
    """Raised when a caller violates an operation's precondition."""
    pass


class ConfigurationError(PipelineError, ValueError):
    """Raised for invalid configuration keys, values or scopes."""
    pass


class StructuralError(PipelineError):
    """Raised when two networks or registries do not line up."""
    pass


class NumericalError(PipelineError):
    """Raised when a non-finite value appears or a numerical check fails."""
    pass


class DataError(PipelineError):
    """Raised for missing or unreadable datasets and run artifacts."""
    pass


class ParseError(DataError):
    """Raised when an on-disk file is malformed."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} (byte {offset}): {message}")


class CheckpointError(DataError):
    """Raised when a checkpoint cannot be decoded or fails its CRC."""
    pass
