"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ShapeError(ContractError):
    """Array dimensions are inconsistent with the requested operation."""


class FormatError(ValueError):
    """A file on disk does not follow its declared binary layout.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
