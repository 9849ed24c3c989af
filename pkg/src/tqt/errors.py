"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not match the operation's contract."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class TensorFormatError(ValueError):
    """A tensor file is truncated or has a bad header."""


class GraphParseError(ValueError):
    """Textual graph could not be parsed.

    Carries a 1-based line number when the offending line is known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)
        self.line = line


class GraphError(ValueError):
    """Structural problem in an in-memory graph (cycle, dangling ref)."""


class TransformError(RuntimeError):
    """A graph rewrite matched a pattern it cannot handle."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


class AccumulatorOverflowError(RuntimeError):
    """Integer accumulator exceeded its declared width at runtime."""
