"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class AlignmentError(ValueError):
    """Targets and frames disagree in count."""


class FormatError(ValueError):
    """A file does not follow its documented layout.

    ``offset`` is a byte offset for binary files; ``line`` is a 1-based line
    number for text files.
    """

    def __init__(self, message, *, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class UnsupportedVersionError(FormatError):
    pass


class EmptyDatasetError(FormatError):
    pass
