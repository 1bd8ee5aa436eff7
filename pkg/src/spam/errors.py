"""Exception types raised across the package."""


class SpamError(Exception):
    """Base class for all package errors."""

    kind = "spam"


class ShapeError(SpamError, ValueError):
    kind = "shape"


class UnsupportedOrderError(SpamError, ValueError):
    kind = "unsupported_order"


class OracleCapError(SpamError, MemoryError):
    kind = "oracle_cap"


class DegenerateSpectrumError(SpamError, ValueError):
    kind = "degenerate_spectrum"


class NonFiniteError(SpamError, FloatingPointError):
    """Training produced NaN/Inf. ``diagnostics`` holds step/batch context."""

    kind = "non_finite"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DataError(SpamError, ValueError):
    """Malformed input data. ``row``/``column`` locate the offending cell."""

    kind = "data"

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class MetricError(SpamError, ValueError):
    kind = "metric"


class SchemaError(SpamError, ValueError):
    kind = "schema"
