"""Exception hierarchy shared by all pimaps modules."""


class PimError(Exception):
    """Base class for errors raised by pimaps."""


class ConfigurationError(PimError, ValueError):
    """Shapes or settings that do not fit together."""


class InvalidInputError(PimError, ValueError):
    """Data that violates a precondition (empty, non-finite, inconsistent)."""


class InvalidStateError(PimError, RuntimeError):
    """An operation was called on an object that is not ready for it."""


class ParseError(PimError, ValueError):
    """Malformed file contents.

    ``offset`` is a byte offset for binary formats; ``row``/``column`` are
    1-based positions for text formats.
    """

    def __init__(self, message, offset=None, row=None, column=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.row = row
        self.column = column
