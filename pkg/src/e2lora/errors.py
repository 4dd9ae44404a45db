"""Exception hierarchy shared by all modules."""


class E2LoraError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(E2LoraError):
    """An input violates a documented precondition or invariant."""


class SchemaError(ValidationError):
    """A config document has a bad or unknown field.

    ``field`` holds the dotted path of the offending key.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConvergenceError(E2LoraError):
    """An iterative solver hit its iteration cap.

    ``residual`` is the worst remaining off-diagonal ratio at the cap.
    """

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class RankDeficiencyError(E2LoraError):
    """A matrix expected to have full column rank does not."""


class NumericalError(E2LoraError):
    """A numerical factorization failed beyond recovery."""


class StateError(E2LoraError):
    """An operation was called on an object in the wrong state."""


class DivergenceError(E2LoraError):
    """Training produced a non-finite loss.

    ``batch_index`` is the global index of the offending mini-batch.
    """

    def __init__(self, message, batch_index):
        self.batch_index = batch_index
        super().__init__(f"{message} (batch {batch_index})")
