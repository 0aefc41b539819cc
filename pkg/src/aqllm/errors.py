"""Exception hierarchy.

Every error belongs to one of five families; the CLI maps each family to a
stable exit code (see ``exit_code``).
"""

from __future__ import annotations


class AqError(Exception):
    exit_code = 1


class UsageError(AqError, ValueError):
    """Bad arguments or violated preconditions."""

    exit_code = 2


class PreconditionError(UsageError):
    pass


class ConfigurationError(UsageError):
    """Missing credentials, fixtures, or checkers."""


class DataError(AqError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{message} (field: {field})")
        self.field = field


class ConflictError(DataError):
    pass


class IntegrityError(DataError):
    pass


class ShapeError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class GapError(DataError):
    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class PricingError(DataError):
    pass


class ProviderError(AqError):
    """A remote (or scripted) provider refused or failed a call."""

    exit_code = 4


class TransportError(ProviderError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message if status is None else f"{message} (HTTP {status})")
        self.status = status


class ExhaustedError(ProviderError):
    def __init__(self, message: str, attempts: int, last_error: BaseException | None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class ComplianceError(AqError):
    exit_code = 5


class UnsafeCallError(ComplianceError):
    pass


class CallSyntaxError(ComplianceError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} at position {position}")
        self.position = position


class UnknownFunctionError(ComplianceError):
    pass


class MissingParameterError(ComplianceError):
    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class ArgumentError(ComplianceError):
    """Type or bounds violation for a call argument."""

    def __init__(self, message: str, param: str | None = None, position: int | None = None):
        super().__init__(message)
        self.param = param
        self.position = position


class ContractViolation(ComplianceError):
    pass


class SelectionError(ComplianceError):
    pass


class PipelineError(AqError):
    exit_code = 3

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class PlanningError(PipelineError):
    def __init__(self, message: str):
        super().__init__(message, stage="plan")


class SummaryError(DataError):
    """Worker reply could not be turned into a summary."""


class MalformedSummaryError(SummaryError):
    pass


class OutOfSpanError(SummaryError):
    pass


class NegativeConcentrationError(SummaryError):
    pass


class AggregationError(PipelineError):
    def __init__(self, message: str):
        super().__init__(message, stage="aggregate")


class CoverageError(PipelineError):
    def __init__(self, message: str):
        super().__init__(message, stage="coverage")


class EvaluationError(AqError):
    exit_code = 6


class DegenerateEmbeddingError(EvaluationError):
    pass


def exit_code(exc: BaseException) -> int:
    return getattr(exc, "exit_code", 1)
