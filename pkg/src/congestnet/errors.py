"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage 1, data/format 2, numeric 3.
"""


class CongestNetError(Exception):
    pass


class ConfigError(CongestNetError, ValueError):
    """Shapes, widths or settings that do not fit together."""


class NumericError(CongestNetError, ArithmeticError):
    """A NaN or Inf showed up somewhere it must not."""


class FormatError(CongestNetError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(CongestNetError):
    pass
