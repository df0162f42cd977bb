"""Exception types shared across the package.

Every error raised by library code derives from QkalignError so callers
(notably the CLI) can map failures onto stable categories.
"""


class QkalignError(Exception):
    """Base class for all package errors."""

    category = "internal"


class ContractError(QkalignError, ValueError):
    """A documented precondition was violated by the caller."""

    category = "contract"


class DimensionError(QkalignError, ValueError):
    """Array shapes incompatible with the requested operation."""

    category = "dimension"


class DomainError(QkalignError, ValueError):
    """Input outside the mathematical domain of the operation."""

    category = "domain"


class ConfigError(QkalignError, ValueError):
    """Invalid or inconsistent configuration."""

    category = "config"


class NumericError(QkalignError, ArithmeticError):
    """Non-finite values encountered where finiteness is required."""

    category = "numeric"
