"""Exception hierarchy shared by all modules."""


class MomentPropError(Exception):
    """Base class for every error raised by this package."""


class SizeLimitError(MomentPropError):
    """A matrix or vector would exceed the configured element-count limit."""

    def __init__(self, what, required, allowed):
        self.what = what
        self.required = int(required)
        self.allowed = int(allowed)
        super().__init__(
            f"{what}: requires {self.required} elements, limit is {self.allowed}"
        )


class ModelError(MomentPropError, ValueError):
    """Invalid model file or model definition."""


class ModelParseError(ModelError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ShapeMismatchError(ModelError):
    pass


class ProbabilityError(ModelError):
    pass


class NumericError(MomentPropError, ArithmeticError):
    """Quadrature failed to reach its tolerance."""

    def __init__(self, message, achieved=None):
        self.achieved = achieved
        super().__init__(message)


class DivergenceError(MomentPropError, ArithmeticError):
    """A propagated or simulated state became non-finite."""

    def __init__(self, step, trajectory=None, message=None):
        self.step = step
        self.trajectory = trajectory if trajectory is not None else []
        super().__init__(message or f"non-finite state at step {step}")


class PreconditionError(MomentPropError, ValueError):
    pass


class OracleError(MomentPropError, ValueError):
    """The requested oracle is not applicable to this model."""
