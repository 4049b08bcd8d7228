"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit-code mapping: ``DataError``
(bad inputs, exit code 2) and ``NumericError`` (diverged or overflowed
computation, exit code 3).
"""


class GraphDFError(Exception):
    """Base class for all package-specific errors."""


class DataError(GraphDFError):
    """Invalid or inconsistent input data."""


class MissingObservation(DataError):
    """A (node, timestamp) cell is absent after grid alignment."""


class IrregularGrid(DataError):
    """Timestamps are not evenly spaced at the declared period."""


class InvalidValue(DataError):
    """A value violates its domain (negative usage, sigma <= 0, ...)."""


class NoLag(DataError):
    """The first step of a series has no lagged target to condition on."""


class DegenerateDenominator(DataError):
    """A normalizing denominator is zero (e.g. all-zero actuals)."""


class ShapeError(DataError):
    """Operands have incompatible dimensions."""


class OracleBudgetExceeded(DataError):
    """A dense test oracle was asked to handle more nodes than its budget."""


class NumericError(GraphDFError):
    """Numeric failure during model evaluation or training."""


class NumericOverflow(NumericError):
    """A non-finite value appeared in a named intermediate quantity."""


class TrainingDiverged(NumericError):
    """The training loss became non-finite."""


class DegenerateGraphWarning(UserWarning):
    """Sparsification pruned every candidate edge; graph has no edges."""
