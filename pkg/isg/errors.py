"""
Exception hierarchy for the toolkit.

Evaluation code catches most of these per sample and records them as tagged
failures; only backend exhaustion and corpus schema errors end a run.
"""

from typing import Any, Optional


class ISGError(Exception):
    """Base class for every error raised by the toolkit."""

    code = "error"


# --- content ---


class InvalidToken(ISGError, ValueError):
    code = "invalid_token"


class TokenOutOfRange(ISGError, LookupError):
    code = "token_out_of_range"

    def __init__(self, token: str, available: int):
        super().__init__(f"{token} does not resolve: only {available} block(s) of that kind")
        self.token = token
        self.available = available


# --- gateway ---


class BackendUnreachable(ISGError):
    code = "backend_unreachable"


class FixtureMiss(ISGError):
    code = "fixture_miss"

    def __init__(self, fingerprint: str, purpose: Optional[str] = None):
        super().__init__(f"No scripted reply for {purpose or 'request'} ({fingerprint[:12]})")
        self.fingerprint = fingerprint
        self.purpose = purpose


class NoJsonFound(ISGError, ValueError):
    code = "no_json"


# --- evaluation levels ---


class MalformedPrediction(ISGError):
    code = "malformed_prediction"


class ExtractionFailed(ISGError):
    code = "extraction_failed"


class GenerationFailed(ISGError):
    code = "generation_failed"


class UnparseableJudgment(ISGError):
    code = "unparseable_judgment"


class MixedModes(ISGError, ValueError):
    code = "mixed_modes"


class EmptyInput(ISGError, ValueError):
    code = "empty_input"


# --- corpus / runner ---


class SchemaViolation(ISGError):
    code = "schema_violation"

    def __init__(self, file: str, field: str, message: str = "invalid"):
        super().__init__(f"{file}: field '{field}': {message}")
        self.file = file
        self.field = field


class DuplicateSampleId(ISGError):
    code = "duplicate_sample_id"

    def __init__(self, sample_id: str, files: tuple[str, str]):
        super().__init__(f"Sample id '{sample_id}' declared in both {files[0]} and {files[1]}")
        self.sample_id = sample_id
        self.files = files


class MissingAnswer(ISGError):
    code = "missing_answer"


class ReportWriteError(ISGError, OSError):
    code = "io_error"


# --- agent ---


class MalformedPlan(ISGError):
    code = "malformed_plan"


class ToolFailure(ISGError):
    code = "tool_failure"

    def __init__(self, step: int, message: str):
        super().__init__(f"Step {step}: {message}")
        self.step = step
        self.message = message


class CaptionFailure(ISGError):
    code = "caption_failure"

    def __init__(self, step: int, message: str = "caption call failed"):
        super().__init__(f"Step {step}: {message}")
        self.step = step
        self.message = message


class RefinementExhausted(ISGError):
    code = "refinement_exhausted"

    def __init__(self, message: str, best_effort: Any = None, flags: Optional[list[str]] = None):
        super().__init__(message)
        self.best_effort = best_effort
        self.flags = list(flags or [])
