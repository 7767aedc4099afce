from __future__ import annotations

from typing import Any


class DeltissError(Exception):
    """Base class for every domain failure raised by the toolkit.

    ``cause`` is a short condition label (for example ``observer_dissipation`` or
    ``terminal_output_row[0]``) and ``details`` holds any extra data worth serializing.
    ``transcript`` lists the synthesis attempts made before the failure, empty outside design
    runs.
    """

    def __init__(
        self,
        message: str,
        cause: str | None = None,
        details: dict[str, Any] | None = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        self.cause = cause
        self.details = details or {}
        self.transcript: list[dict[str, Any]] = []

    def to_dict(self) -> dict[str, Any]:
        return {
            "error": type(self).__name__,
            "cause": self.cause,
            "message": self.message,
            "details": self.details,
        }


class ModelError(DeltissError, ValueError):
    pass


class GeometryError(DeltissError, ValueError):
    pass


class SdpError(DeltissError):
    pass


class SchemaError(DeltissError, ValueError):
    pass


class ConfigurationError(DeltissError):
    pass


class SetpointInfeasibleError(DeltissError):
    pass


class SynthesisError(DeltissError):
    """A design stage could not produce a certified result.

    ``transcript`` is the list of attempts made so far (already serializable).
    """

    def __init__(
        self,
        message: str,
        cause: str | None = None,
        details: dict[str, Any] | None = None,
        transcript: list[dict[str, Any]] | None = None,
    ) -> None:
        super().__init__(message, cause=cause, details=details)
        self.transcript = transcript or []

    def to_dict(self) -> dict[str, Any]:
        data = super().to_dict()
        data["transcript"] = self.transcript
        return data


class DetectabilityError(SynthesisError):
    pass


class StabilizabilityError(SynthesisError):
    pass


class SetpointRejectedError(SynthesisError):
    pass


class BudgetExhaustedError(SynthesisError):
    pass


class TerminalInfeasibleError(SynthesisError):
    pass


class EmptyTightenedSetError(DeltissError):
    pass


class FhocpInfeasibleError(DeltissError):
    pass


class FhocpSolverError(DeltissError):
    pass


class DesignCertificationError(DeltissError):
    pass


# failures that end a design run
DESIGN_FAILURES = (SynthesisError, EmptyTightenedSetError, SetpointInfeasibleError)
