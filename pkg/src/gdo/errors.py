"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf where finite values are required."""


class IdxFormatError(ValueError):
    """An IDX file is malformed: bad magic, inconsistent counts, or a
    payload whose length disagrees with the header."""


class ConfigError(ValueError):
    """An experiment config file is missing, malformed, or contains
    unknown or ill-typed keys."""


class ContractError(ValueError):
    """A caller violated an API contract, e.g. training on a source
    domain that carries no labels."""
