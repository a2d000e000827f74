"""Exception hierarchy shared by every module.

Invalid configuration and invalid inputs stay ``ValueError`` subclasses so
callers that only know about ``ValueError`` keep working.
"""


class CoBERLError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(CoBERLError, ValueError):
    """A configuration value or component wiring is inconsistent."""


class InputError(CoBERLError, ValueError):
    """An operation received data that violates its preconditions."""


class NumericError(CoBERLError, ArithmeticError):
    """A non-finite value was produced or supplied."""


class HarnessError(CoBERLError, RuntimeError):
    """The training harness cannot continue."""
