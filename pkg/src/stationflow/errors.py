"""Exception types shared across the package."""


class SchemaError(ValueError):
    """An input file is missing required columns or is structurally unusable."""


class DataError(ValueError):
    """Input data violates a precondition that cannot be repaired row by row."""


class NumericError(RuntimeError):
    """A numeric computation produced non-finite or otherwise unusable values."""
