class SyncMaskError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(SyncMaskError, ValueError):
    """Operand extents do not fit the operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class NonFiniteError(SyncMaskError, ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class NonFiniteLossError(NonFiniteError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"loss term '{term}' is not finite ({value})")


class InvariantError(SyncMaskError):
    """A structural guarantee of the training pipeline was violated."""
