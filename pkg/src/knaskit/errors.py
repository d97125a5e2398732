"""Exception hierarchy shared by every knaskit module."""


class KnasError(Exception):
    """Base class for all knaskit errors."""


class ContractError(KnasError, ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Tensor shapes do not line up."""


class NumericError(KnasError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class StateError(KnasError, RuntimeError):
    """An object was used out of order (e.g. backward before forward)."""


class FormatError(KnasError):
    """A file on disk does not have the expected layout."""


class DivergenceError(KnasError):
    """An optimization run blew up."""


class NoViableCandidate(KnasError):
    """Every candidate failed, so nothing can be selected."""
