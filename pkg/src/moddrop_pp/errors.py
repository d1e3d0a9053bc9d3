"""Exception hierarchy shared by every module."""


class ModDropError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ModDropError, ValueError):
    pass


class DomainError(ModDropError, ValueError):
    pass


class ConfigError(ModDropError, ValueError):
    pass


class NumericsError(ModDropError, ArithmeticError):
    pass


class InvalidCodeError(ModDropError, ValueError):
    pass


class DegenerateError(ModDropError, ValueError):
    pass


class FormatError(ModDropError):
    """Malformed binary or manifest file.

    ``offset`` is the byte offset (or line number for text manifests) at
    which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
