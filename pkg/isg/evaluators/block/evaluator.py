"""
Block-level evaluation.

Requirements between blocks are extracted as (subject, object, relation)
triplets over content tokens, turned into verification questions and judged
by the VQA backend, either as Yes/No or on a 1-10 scale.
"""

import asyncio
import json
import logging
import re
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from isg.config import VqaMode
from isg.content import (
    BlockKind,
    ContentToken,
    InterleavedSequence,
    TokenScope,
    labelled_parts,
    resolve_token,
)
from isg.errors import (
    EmptyInput,
    ExtractionFailed,
    GenerationFailed,
    InvalidToken,
    MixedModes,
    NoJsonFound,
    TokenOutOfRange,
    UnparseableJudgment,
)
from isg.evaluators.common import (
    Failure,
    collapse_whitespace,
    parse_judge_reply,
    parse_score,
    parse_yes_no,
)
from isg.evaluators.structure import StructurePrediction
from isg.gateway import Gateway, extract_json
from isg.prompts import (
    BLOCK_QUESTION_PROMPT,
    BLOCK_REQUIREMENT_FEW_SHOT,
    BLOCK_REQUIREMENT_PROMPT,
    BLOCK_VQA_MULTIMODAL_SCORE_PROMPT,
    BLOCK_VQA_MULTIMODAL_YES_NO_PROMPT,
    BLOCK_VQA_TEXTS_SCORE_PROMPT,
    BLOCK_VQA_TEXTS_YES_NO_PROMPT,
)

logger = logging.getLogger(__name__)

SCALE_MIN = {VqaMode.SCORE: 1.0, VqaMode.YES_NO: 0.0}

_RAW_IMAGE_TOKEN = re.compile(r"<(?:gen|query)_img\d+>")
_EXTRA_IMAGE = re.compile(r"\b(third|fourth|fifth)\s+image\b", re.IGNORECASE)


class RelationTuple(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject: ContentToken
    object: ContentToken
    relation: str

    @field_validator("relation")
    @classmethod
    def _clean_relation(cls, value: str) -> str:
        value = collapse_whitespace(value)
        if not value:
            raise ValueError("relation must not be empty")
        return value

    @model_validator(mode="after")
    def _distinct_ends(self) -> "RelationTuple":
        if self.subject == self.object:
            raise ValueError(f"subject and object are both {self.subject}")
        return self

    def key(self) -> tuple[str, str, str]:
        return (self.subject.render(), self.object.render(), self.relation)

    def sentence(self) -> str:
        return f"{self.subject} {self.relation} {self.object}"

    def to_json(self) -> dict[str, str]:
        return {"subject": str(self.subject), "object": str(self.object), "relation": self.relation}


class BlockQuestion(BaseModel):
    model_config = ConfigDict(frozen=True)

    triplet: RelationTuple
    question: str

    @field_validator("question")
    @classmethod
    def _at_most_two_images(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("question must not be empty")
        if _RAW_IMAGE_TOKEN.search(value) or _EXTRA_IMAGE.search(value):
            raise ValueError("question must refer to images as 'this/first/second image'")
        return value


class BlockJudgment(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: VqaMode
    yes: Optional[bool] = None
    score: Optional[int] = None
    reason: str = ""

    @model_validator(mode="after")
    def _mode_field(self) -> "BlockJudgment":
        if self.mode is VqaMode.YES_NO:
            if self.yes is None or self.score is not None:
                raise ValueError("YES_NO judgment carries 'yes' only")
        else:
            if self.score is None or self.yes is not None:
                raise ValueError("SCORE judgment carries 'score' only")
            if not 1 <= self.score <= 10:
                raise ValueError(f"score {self.score} outside [1, 10]")
        return self

    @classmethod
    def minimum(cls, mode: VqaMode, reason: str) -> "BlockJudgment":
        if mode is VqaMode.YES_NO:
            return cls(mode=mode, yes=False, reason=reason)
        return cls(mode=mode, score=1, reason=reason)

    @property
    def value(self) -> float:
        if self.mode is VqaMode.YES_NO:
            return 1.0 if self.yes else 0.0
        return float(self.score)


class BlockLevelResult(BaseModel):
    """Everything the block level produced for one sample; written as block.json."""

    mode: VqaMode
    score: float
    tuples: list[RelationTuple] = []
    questions: list[BlockQuestion] = []
    judgments: list[BlockJudgment] = []
    failures: list[Failure] = []
    skipped: Optional[str] = None

    @classmethod
    def at_minimum(cls, mode: VqaMode, skipped: str) -> "BlockLevelResult":
        return cls(mode=mode, score=SCALE_MIN[mode], skipped=skipped)


# --- parsing ---


def _parse_triplet(entry: Any) -> RelationTuple:
    if isinstance(entry, dict):
        lowered = {str(k).lower(): v for k, v in entry.items()}
        raw = [lowered.get("subject"), lowered.get("object"), lowered.get("relation")]
    elif isinstance(entry, (list, tuple)) and len(entry) == 3:
        raw = list(entry)
    else:
        raise ValueError(f"not a triplet: {entry!r}")
    if not all(isinstance(item, str) for item in raw):
        raise ValueError(f"triplet fields must be strings: {entry!r}")
    return RelationTuple(
        subject=ContentToken.parse(raw[0]), object=ContentToken.parse(raw[1]), relation=raw[2]
    )


def _reply_list(data: Any, *keys: str) -> Optional[list]:
    if isinstance(data, list):
        return data
    if isinstance(data, dict):
        lowered = {str(k).lower(): v for k, v in data.items()}
        for key in keys:
            if isinstance(lowered.get(key), list):
                return lowered[key]
    return None


# --- operations ---


async def extract_relation_tuples(
    query: InterleavedSequence,
    pred: StructurePrediction,
    gateway: Gateway,
    few_shot: bool = True,
    with_images: bool = False,
) -> list[RelationTuple]:
    """
    Extract block-to-block requirement triplets for a query.

    Triplets naming tokens outside the predicted structure are dropped.

    Raises:
        ExtractionFailed: reply has no parseable "relation" list
    """
    role_prompt = BLOCK_REQUIREMENT_PROMPT
    if few_shot:
        role_prompt = f"{role_prompt}\n\n{BLOCK_REQUIREMENT_FEW_SHOT}"
    request = gateway.request(
        role_prompt,
        "Here is the query:",
        *labelled_parts(query, TokenScope.QUERY, with_images=with_images),
        f"Here is the element sequence:\n{pred.describe()}",
    )
    response = await gateway.complete(request, purpose="block.extract")
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise ExtractionFailed(str(e)) from e
    entries = _reply_list(data, "relation", "relations", "relatio")
    if entries is None:
        raise ExtractionFailed("block requirement reply has no 'relation' list")

    vocabulary = pred.vocabulary()
    tuples: list[RelationTuple] = []
    seen: set[tuple[str, str, str]] = set()
    for entry in entries:
        try:
            triplet = _parse_triplet(entry)
        except (InvalidToken, ValidationError, ValueError) as e:
            logger.warning(f"Dropping malformed triplet {entry!r}: {e}")
            continue
        if triplet.subject not in vocabulary or triplet.object not in vocabulary:
            logger.warning(f"Dropping triplet outside predicted structure: {triplet.sentence()}")
            continue
        if triplet.key() in seen:
            continue
        seen.add(triplet.key())
        tuples.append(triplet)
    return tuples


async def generate_block_questions(
    tuples: list[RelationTuple], gateway: Gateway
) -> list[BlockQuestion]:
    """
    Write one verification question per triplet.

    Output objects are matched back to triplets by exact (subject, object,
    relation) equality after whitespace normalization; anything else is discarded.

    Raises:
        EmptyInput: no triplets
        GenerationFailed: reply has no parseable list
    """
    if not tuples:
        raise EmptyInput("generate_block_questions needs at least one triplet")
    payload = json.dumps([t.to_json() for t in tuples], ensure_ascii=False, indent=2)
    request = gateway.request(BLOCK_QUESTION_PROMPT, f"Here is the input:\n{payload}")
    response = await gateway.complete(request, purpose="block.questions")
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise GenerationFailed(str(e)) from e
    entries = _reply_list(data, "questions", "question")
    if entries is None:
        raise GenerationFailed("block question reply is not a list")

    by_key = {t.key(): t for t in tuples}
    answered: dict[tuple[str, str, str], BlockQuestion] = {}
    for entry in entries:
        if not isinstance(entry, dict):
            continue
        lowered = {str(k).lower(): v for k, v in entry.items()}
        try:
            key = (
                ContentToken.parse(lowered.get("subject")).render(),
                ContentToken.parse(lowered.get("object")).render(),
                collapse_whitespace(str(lowered.get("relation", ""))),
            )
        except InvalidToken:
            logger.warning(f"Discarding question with bad tokens: {entry!r}")
            continue
        triplet = by_key.get(key)
        if triplet is None:
            logger.warning(f"Discarding question for unknown triplet {key}")
            continue
        if key in answered:
            continue
        try:
            answered[key] = BlockQuestion(triplet=triplet, question=str(lowered.get("question", "")))
        except ValidationError as e:
            logger.warning(f"Discarding question for {triplet.sentence()}: {e.errors()[0]['msg']}")

    # keep triplet order
    return [answered[t.key()] for t in tuples if t.key() in answered]


def _role_prompt(mode: VqaMode, texts_only: bool) -> str:
    if texts_only:
        return BLOCK_VQA_TEXTS_SCORE_PROMPT if mode is VqaMode.SCORE else BLOCK_VQA_TEXTS_YES_NO_PROMPT
    if mode is VqaMode.SCORE:
        return BLOCK_VQA_MULTIMODAL_SCORE_PROMPT
    return BLOCK_VQA_MULTIMODAL_YES_NO_PROMPT


async def judge_block_question(
    q: BlockQuestion,
    query: InterleavedSequence,
    answer: InterleavedSequence,
    mode: VqaMode,
    gateway: Gateway,
) -> BlockJudgment:
    """Judge one block question; unresolvable blocks and bad replies get the scale minimum."""
    ends = (q.triplet.subject, q.triplet.object)
    try:
        blocks = [resolve_token(token, query, answer) for token in ends]
    except TokenOutOfRange as e:
        logger.info(f"{q.triplet.sentence()}: {e}")
        return BlockJudgment.minimum(mode, "missing block")

    texts_only = all(block.kind is BlockKind.TEXT for block in blocks)
    if texts_only:
        parts: list = [f"Text 1: {blocks[0].text}", f"Text 2: {blocks[1].text}"]
    else:
        parts = []
        for token, block in zip(ends, blocks):
            if block.kind is BlockKind.TEXT:
                parts.append(f"{token}: {block.text}")
            else:
                parts.extend([f"{token}:", block.image])
    parts.append(f"Question: {q.question}")

    request = gateway.request(_role_prompt(mode, texts_only), *parts)
    response = await gateway.complete(request, purpose="block.judge")
    try:
        judge, reason = parse_judge_reply(response.text)
        if mode is VqaMode.YES_NO:
            return BlockJudgment(mode=mode, yes=parse_yes_no(judge), reason=reason)
        return BlockJudgment(mode=mode, score=parse_score(judge), reason=reason)
    except UnparseableJudgment as e:
        logger.warning(f"Unparseable block judgment for {q.triplet.sentence()}: {e}")
        return BlockJudgment.minimum(mode, f"unparseable judgment: {e}")


def score_block_level(judgments: list[BlockJudgment], mode: VqaMode) -> float:
    """Mean score (SCORE) or fraction of yes (YES_NO); an empty list scores the scale minimum."""
    if any(j.mode is not mode for j in judgments):
        raise MixedModes(f"judgments mix modes; expected only {mode.value}")
    if not judgments:
        return SCALE_MIN[mode]
    return sum(j.value for j in judgments) / len(judgments)


async def evaluate_block_level(
    query: InterleavedSequence,
    answer: InterleavedSequence,
    pred: StructurePrediction,
    gateway: Gateway,
    mode: VqaMode = VqaMode.SCORE,
    few_shot: bool = True,
    with_images: bool = False,
) -> BlockLevelResult:
    failures: list[Failure] = []
    try:
        tuples = await extract_relation_tuples(query, pred, gateway, few_shot, with_images)
    except ExtractionFailed as e:
        logger.warning(f"Block requirement extraction failed: {e}")
        return BlockLevelResult(
            mode=mode, score=SCALE_MIN[mode], failures=[Failure.of("block", e)]
        )

    questions: list[BlockQuestion] = []
    if tuples:
        try:
            questions = await generate_block_questions(tuples, gateway)
        except GenerationFailed as e:
            logger.warning(f"Block question generation failed: {e}")
            failures.append(Failure.of("block", e))

    judgments = list(
        await asyncio.gather(
            *(judge_block_question(q, query, answer, mode, gateway) for q in questions)
        )
    )
    return BlockLevelResult(
        mode=mode,
        score=score_block_level(judgments, mode),
        tuples=tuples,
        questions=questions,
        judgments=judgments,
        failures=failures,
    )
