"""Exception types shared across the package."""


class MDGCNError(Exception):
    """Base class for all package errors."""


class ShapeError(MDGCNError, ValueError):
    pass


class GradientError(MDGCNError):
    """Raised by the differentiation engine (bad loss slot, non-finite probe)."""


class ValidationError(MDGCNError, ValueError):
    """A connectivity matrix or dataset violates its invariants."""


class SinkhornConvergenceError(MDGCNError, ArithmeticError):
    def __init__(self, residual, iterations):
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"Sinkhorn did not converge after {iterations} iterations "
            f"(residual {self.residual:.3e})"
        )


class TrainingError(MDGCNError, ArithmeticError):
    pass


class CheckpointError(MDGCNError, ValueError):
    pass


class ConfigError(MDGCNError, ValueError):
    pass
