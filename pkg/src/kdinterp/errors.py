"""Exception hierarchy shared by every module."""


class KDError(Exception):
    """Base class for all errors raised by kdinterp."""


class ShapeError(KDError, ValueError):
    """Tensor extents are inconsistent with an operation."""


class ParameterError(KDError, ValueError):
    """A scalar hyper-parameter is outside its valid range."""


class ValidationError(KDError, ValueError):
    """Input data violates a documented precondition."""


class ContractError(KDError, RuntimeError):
    """An API was called in a state it does not support."""


class FormatError(KDError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position where the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
