"""Exception hierarchy shared by every module."""


class BCNNError(Exception):
    """Base class for library errors."""


class ShapeError(BCNNError, ValueError):
    """Operand extents are incompatible with an operation's contract."""


class AlignmentError(ShapeError):
    """Two feature maps differ spatially by more than one row/column."""


class ConfigError(BCNNError, ValueError):
    """Invalid configuration or parameter value."""


class ContractError(BCNNError, ValueError):
    """A precondition that is not about shapes was violated."""


class FormatError(BCNNError, ValueError):
    """A serialized file is malformed, truncated or of an unsupported kind."""
