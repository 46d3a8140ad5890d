"""Exception types raised across the package."""


class RegistrationError(Exception):
    """Base class for all errors raised by se3reg."""


class DegenerateGeometry(RegistrationError):
    """The weighted normal equations are rank deficient."""


class DisconnectedGraph(RegistrationError):
    """A view graph does not connect every scan."""


class EmptyAfterPrune(RegistrationError):
    """Too few nearest-neighbour pairs survived distance pruning."""


class ParseError(RegistrationError):
    """Malformed input file. Carries the offending line or byte offset."""

    def __init__(self, message, *, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class UnsupportedFormat(RegistrationError):
    """A well-formed file in a format variant we do not read."""


class IndexOutOfRange(RegistrationError):
    """A correspondence index points outside its cloud."""
