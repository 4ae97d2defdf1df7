"""Exception hierarchy shared by every graphrouter module."""


class GraphRouterError(Exception):
    """Base class for all errors raised by graphrouter."""


class ValidationError(GraphRouterError, ValueError):
    """Bad input: malformed files, unknown ids, inconsistent shapes or splits.

    ``code`` is a short machine-readable tag, e.g. ``unknown_task``.
    """

    def __init__(self, message="", code: str = "invalid_input"):
        super().__init__(message)
        self.code = code


class ShapeError(ValidationError):
    """Operand shapes are incompatible for a tensor primitive."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}", code="shape_mismatch")


class NumericError(GraphRouterError, ArithmeticError):
    """Non-finite values appeared during training or optimisation."""
