"""
Structure-level evaluation.

One model call predicts the token sequence of the expected answer; the answer's
structure signature must then equal it element-wise.
"""

import logging
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from isg.content import (
    BlockKind,
    ContentToken,
    InterleavedSequence,
    StructureSignature,
    TokenScope,
    labelled_parts,
    normalize_sequence,
    structure_signature,
)
from isg.errors import EmptyInput, InvalidToken, MalformedPrediction, NoJsonFound
from isg.gateway import Gateway, extract_json
from isg.prompts import STRUCTURE_EXTRACTION_PROMPT, STRUCTURE_FEW_SHOT

logger = logging.getLogger(__name__)


class StructurePrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    query_tokens: tuple[ContentToken, ...] = ()
    answer_tokens: tuple[ContentToken, ...]
    thought: Optional[str] = None

    @field_validator("answer_tokens")
    @classmethod
    def _check_answer_tokens(cls, value: tuple[ContentToken, ...]) -> tuple[ContentToken, ...]:
        expected = {BlockKind.TEXT: 1, BlockKind.IMAGE: 1}
        previous: Optional[ContentToken] = None
        for token in value:
            if token.scope is not TokenScope.GEN:
                raise ValueError(f"answer token {token} is not a gen token")
            if token.index != expected[token.kind]:
                raise ValueError(f"answer token {token} breaks consecutive numbering")
            if previous is not None and previous.kind is BlockKind.TEXT and token.kind is BlockKind.TEXT:
                raise ValueError(f"adjacent text tokens {previous} {token}")
            expected[token.kind] += 1
            previous = token
        return value

    @property
    def signature(self) -> StructureSignature:
        return StructureSignature(sequence=tuple(token.kind for token in self.answer_tokens))

    def vocabulary(self) -> set[ContentToken]:
        """Every token a requirement triplet may cite: query blocks plus predicted answer blocks."""
        return set(self.query_tokens) | set(self.answer_tokens)

    def gen_images(self) -> list[ContentToken]:
        return [token for token in self.answer_tokens if token.kind is BlockKind.IMAGE]

    def describe(self) -> str:
        query = ", ".join(str(t) for t in self.query_tokens)
        answer = ", ".join(str(t) for t in self.answer_tokens)
        return f"Query: [{query}]\nAnswer: [{answer}]"

    @classmethod
    def from_reply(cls, data: Any) -> "StructurePrediction":
        """
        Parse the {"Query", "Answer", "Thought"} reply object.

        Raises:
            MalformedPrediction: keys missing or tokens outside the grammar
        """
        if not isinstance(data, dict) or not isinstance(data.get("Answer"), list):
            raise MalformedPrediction("structure reply lacks an 'Answer' list")
        if not isinstance(data.get("Query", []), list):
            raise MalformedPrediction("structure reply 'Query' is not a list")
        try:
            return cls(
                query_tokens=tuple(ContentToken.parse(raw) for raw in data.get("Query", [])),
                answer_tokens=tuple(ContentToken.parse(raw) for raw in data["Answer"]),
                thought=data.get("Thought") if isinstance(data.get("Thought"), str) else None,
            )
        except (InvalidToken, ValidationError) as e:
            raise MalformedPrediction(f"structure reply violates the token grammar: {e}") from e


class StructuralVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    matched: bool
    predicted: StructureSignature
    actual: StructureSignature


async def predict_structure(
    query: InterleavedSequence, gateway: Gateway, few_shot: bool = True
) -> StructurePrediction:
    """
    Ask the judge model which interleaved structure the query expects.

    Raises:
        EmptyInput: empty query
        MalformedPrediction: no JSON, missing keys, or bad tokens in the reply
    """
    if not len(query):
        raise EmptyInput("cannot predict structure for an empty query")

    role_prompt = STRUCTURE_EXTRACTION_PROMPT
    if few_shot:
        role_prompt = f"{role_prompt}\n\n{STRUCTURE_FEW_SHOT}"
    request = gateway.request(
        role_prompt, "Here is the query:", *labelled_parts(query, TokenScope.QUERY)
    )
    response = await gateway.complete(request, purpose="structure")
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise MalformedPrediction(str(e)) from e
    prediction = StructurePrediction.from_reply(data)
    logger.debug(f"Predicted structure {prediction.signature}")
    return prediction


def match_structures(pred: StructurePrediction, answer: InterleavedSequence) -> StructuralVerdict:
    actual = structure_signature(normalize_sequence(answer))
    predicted = pred.signature
    return StructuralVerdict(matched=predicted == actual, predicted=predicted, actual=actual)


def structural_score(verdicts: list[StructuralVerdict]) -> float:
    if not verdicts:
        raise EmptyInput("structural_score needs at least one verdict")
    return sum(1 for v in verdicts if v.matched) / len(verdicts)
