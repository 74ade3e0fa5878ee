"""
Helpers shared by the evaluation levels: judge-reply parsing and failure records.
"""

import re
from typing import Any

from pydantic import BaseModel

from isg.errors import ISGError, NoJsonFound, UnparseableJudgment
from isg.gateway import extract_json

YES_WORDS = {"yes", "true", "correct", "y"}
NO_WORDS = {"no", "false", "incorrect", "n"}

_LEADING_NUMBER = re.compile(r"^\s*(-?\d+(?:\.\d+)?)")


class Failure(BaseModel):
    """A tagged, non-fatal failure recorded in a sample report."""

    level: str
    code: str
    message: str

    @classmethod
    def of(cls, level: str, error: ISGError) -> "Failure":
        return cls(level=level, code=error.code, message=str(error))


def parse_judge_reply(text: str) -> tuple[Any, str]:
    """
    Pull the "Judge" and "Reason" fields out of a VQA reply.

    Raises:
        UnparseableJudgment: no JSON object or no Judge field
    """
    try:
        data = extract_json(text)
    except NoJsonFound as e:
        raise UnparseableJudgment(str(e)) from e
    if isinstance(data, list) and data and isinstance(data[0], dict):
        data = data[0]
    if not isinstance(data, dict):
        raise UnparseableJudgment("judge reply is not a JSON object")
    lowered = {str(k).strip().lower(): v for k, v in data.items()}
    if "judge" not in lowered:
        raise UnparseableJudgment("judge reply has no 'Judge' field")
    reason = lowered.get("reason", "")
    return lowered["judge"], reason if isinstance(reason, str) else str(reason)


def parse_yes_no(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        word = value.strip().strip(".!").lower()
        if word in YES_WORDS:
            return True
        if word in NO_WORDS:
            return False
    raise UnparseableJudgment(f"expected Yes or No, got {value!r}")


def parse_score(value: Any, low: int = 1, high: int = 10) -> int:
    """Integer score within [low, high]. Out-of-range values are rejected, not clamped."""
    if isinstance(value, bool):
        raise UnparseableJudgment(f"expected a score, got {value!r}")
    number: float
    if isinstance(value, (int, float)):
        number = float(value)
    elif isinstance(value, str) and _LEADING_NUMBER.match(value):
        number = float(_LEADING_NUMBER.match(value).group(1))
    else:
        raise UnparseableJudgment(f"expected a score, got {value!r}")
    if not number.is_integer():
        raise UnparseableJudgment(f"score {value!r} is not an integer")
    if not low <= number <= high:
        raise UnparseableJudgment(f"score {value!r} outside [{low}, {high}]")
    return int(number)


def collapse_whitespace(text: str) -> str:
    return " ".join(text.split())
