"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class PromptLoopError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PromptLoopError, ValueError):
    pass


class EmptyMaskError(PromptLoopError):
    """Mask mass is at or below eps; callers fall back to persistence logic."""


class AnchorMissingError(PromptLoopError):
    pass


class OracleError(PromptLoopError):
    """A decoder oracle failed; the dependent metric must be recorded as missing."""


class JacobianEvaluationError(PromptLoopError):
    def __init__(self, coordinate: int, sign: int, cause: BaseException):
        self.coordinate = coordinate
        self.sign = sign
        self.cause = cause
        super().__init__(
            f"loop failed at perturbed coordinate {coordinate} (sign {sign:+d}): {cause}"
        )


class NumericalFailure(PromptLoopError):
    pass


class InsufficientDataError(PromptLoopError):
    pass


class UndefinedGapError(PromptLoopError, ZeroDivisionError):
    pass


class ObjectAbsentError(PromptLoopError):
    pass


class InvalidConfigError(PromptLoopError, ValueError):
    def __init__(self, message: str, diagnostics: list[str] | None = None):
        self.diagnostics = list(diagnostics or [])
        super().__init__(message)


class TraceValidationError(PromptLoopError):
    def __init__(self, findings: list[str]):
        self.findings = list(findings)
        super().__init__("; ".join(self.findings) or "invalid trace")
