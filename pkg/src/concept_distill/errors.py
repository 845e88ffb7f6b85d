"""Exception types shared across the pipeline."""


class DistillError(Exception):
    """Base class for all library errors."""


class ShapeError(DistillError, ValueError):
    pass


class ContractError(DistillError, ValueError):
    """An operation was called outside its documented preconditions."""


class DegenerateDistribution(DistillError):
    """Score field is single-mode; a bimodal threshold is meaningless."""


class EmptyRefinement(DistillError):
    pass


class NoValidRect(DistillError):
    pass


class UndefinedMetric(DistillError, ValueError):
    pass


class FidNumericalError(DistillError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StageDependencyError(DistillError):
    pass


class BackendNotReady(DistillError, RuntimeError):
    pass
