"""Exception types shared across the package.

Two failure families matter to callers (and map to CLI exit codes):
malformed external data and numeric breakdowns. Everything else is a
plain ValueError and signals a programming error at the call site.
"""


class AsisError(Exception):
    """Base class for errors raised by this package."""


class DataFormatError(AsisError):
    """A file or payload does not follow one of the documented formats."""


class NumericError(AsisError):
    """A computation produced non-finite values or failed a numeric check."""
