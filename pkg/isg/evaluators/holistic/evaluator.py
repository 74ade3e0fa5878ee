"""
Holistic evaluation: one judge call over the whole answer, optionally with the
golden answer as reference, scored on five dimensions plus an overall score.
"""

import logging
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field

from isg.content import InterleavedSequence, TokenScope, labelled_parts
from isg.errors import EmptyInput, NoJsonFound, UnparseableJudgment
from isg.evaluators.common import parse_score
from isg.gateway import Gateway, extract_json
from isg.prompts import HOLISTIC_GOLDEN_CLAUSE, HOLISTIC_JUDGE_PROMPT

logger = logging.getLogger(__name__)

DIMENSIONS = (
    "coherence",
    "content_accuracy",
    "relevance",
    "visual_textual_alignment",
    "creativity",
)

# normalized key (lowercase, alphanumerics only) -> field
_ALIASES = {
    "coherence": "coherence",
    "contentaccuracy": "content_accuracy",
    "accuracy": "content_accuracy",
    "relevance": "relevance",
    "relevanceandresponsiveness": "relevance",
    "responsiveness": "relevance",
    "visualtextualalignment": "visual_textual_alignment",
    "alignment": "visual_textual_alignment",
    "creativity": "creativity",
    "creativityandoriginality": "creativity",
    "originality": "creativity",
    "overall": "overall",
    "overallscore": "overall",
    "finaloverallscore": "overall",
    "finalscore": "overall",
    "analysis": "analysis",
}


def _normalize_key(key: str) -> str:
    return "".join(ch for ch in key.lower() if ch.isalnum())


class HolisticJudgment(BaseModel):
    model_config = ConfigDict(frozen=True)

    coherence: int = Field(ge=1, le=10)
    content_accuracy: int = Field(ge=1, le=10)
    relevance: int = Field(ge=1, le=10)
    visual_textual_alignment: int = Field(ge=1, le=10)
    creativity: int = Field(ge=1, le=10)
    overall: int = Field(ge=1, le=10)
    analysis: str = ""
    flagged: bool = False
    reason: Optional[str] = None

    @classmethod
    def fallback(cls, reason: str) -> "HolisticJudgment":
        scores = {name: 1 for name in DIMENSIONS}
        return cls(**scores, overall=1, flagged=True, reason=reason)

    def dimensions(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in DIMENSIONS}

    @classmethod
    def from_reply(cls, data: Any) -> "HolisticJudgment":
        """
        Parse the judge's JSON. Key spelling is forgiven, score ranges are not.

        Raises:
            UnparseableJudgment: missing dimension or a score outside [1, 10]
        """
        if not isinstance(data, dict):
            raise UnparseableJudgment("holistic reply is not a JSON object")
        fields: dict[str, Any] = {}
        explanations: list[str] = []
        for key, value in data.items():
            target = _ALIASES.get(_normalize_key(str(key)))
            if target is None:
                continue
            if target == "analysis":
                fields["analysis"] = value if isinstance(value, str) else str(value)
                continue
            # {"score": 8, "explanation": "..."} is a common shape too
            if isinstance(value, dict):
                lowered = {str(k).lower(): v for k, v in value.items()}
                explanation = lowered.get("explanation") or lowered.get("reason")
                if isinstance(explanation, str):
                    explanations.append(f"{target}: {explanation}")
                value = lowered.get("score")
            fields[target] = parse_score(value)
        missing = [name for name in (*DIMENSIONS, "overall") if name not in fields]
        if missing:
            raise UnparseableJudgment(f"holistic reply lacks {', '.join(missing)}")
        if "analysis" not in fields:
            fields["analysis"] = "\n".join(explanations)
        return cls(**fields)


async def judge_holistic(
    query: InterleavedSequence,
    answer: InterleavedSequence,
    golden: Optional[InterleavedSequence],
    gateway: Gateway,
    use_golden: bool = True,
) -> HolisticJudgment:
    """Judge the whole answer; unparseable or out-of-range replies give a flagged overall of 1."""
    if use_golden and golden is None:
        raise ValueError("golden answer required when use_golden is set")

    role_prompt = HOLISTIC_JUDGE_PROMPT.format(
        golden_clause=HOLISTIC_GOLDEN_CLAUSE if use_golden else ""
    )
    parts: list = ["=== QUERY ===", *labelled_parts(query, TokenScope.QUERY)]
    parts.append("=== ANSWER ===")
    parts.extend(labelled_parts(answer, TokenScope.GEN) or ["(empty answer)"])
    if use_golden:
        parts.append("=== GOLDEN ANSWER ===")
        parts.extend(labelled_parts(golden, TokenScope.GEN, prefix="golden") or ["(empty golden answer)"])
    parts.append("=== END ===")

    request = gateway.request(role_prompt, *parts)
    response = await gateway.complete(request, purpose="holistic")
    try:
        try:
            data = extract_json(response.text)
        except NoJsonFound as e:
            raise UnparseableJudgment(str(e)) from e
        return HolisticJudgment.from_reply(data)
    except UnparseableJudgment as e:
        logger.warning(f"Unparseable holistic judgment: {e}")
        return HolisticJudgment.fallback(str(e))


def holistic_aggregate(judgments: list[HolisticJudgment]) -> float:
    if not judgments:
        raise EmptyInput("holistic_aggregate needs at least one judgment")
    return sum(j.overall for j in judgments) / len(judgments)
