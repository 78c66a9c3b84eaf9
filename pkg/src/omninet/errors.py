"""Exception types raised across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class AllPaddingError(ContractError):
    """A loss was requested over a batch with no supervised positions."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer received a NaN or infinite gradient."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class TrainingAborted(RuntimeError):
    """A training worker failed; the run was stopped."""
