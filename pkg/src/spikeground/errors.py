"""Shared error taxonomy.

Three failure classes cover everything the library checks at runtime:
shape problems, bad parameter values, and calls that violate an API
contract (wrong mode, wrong call order, unsupported combination).
"""


class DimensionError(ValueError):
    """Array shapes disagree with what the operation requires."""


class DomainError(ValueError):
    """A value is outside the mathematically valid domain (e.g. delta <= 0)."""


class ContractError(RuntimeError):
    """The call violates an API contract rather than a numeric domain."""


class NumericalError(ArithmeticError):
    """NaN/Inf appeared where finite values are required."""


class ParseError(ValueError):
    """A serialized file is malformed; the message names the offending line."""
