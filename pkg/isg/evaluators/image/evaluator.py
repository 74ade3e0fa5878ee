"""
Image-level evaluation.

Each generated image is checked against predicted entities, attributes and
relations. Questions form a dependency graph: an attribute or relation question
is only asked once the questions about its entities were answered Yes,
otherwise it counts as failed without a model call.
"""

import asyncio
import json
import logging
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

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
    NoJsonFound,
    TokenOutOfRange,
    UnparseableJudgment,
)
from isg.evaluators.common import Failure, collapse_whitespace, parse_judge_reply, parse_yes_no
from isg.evaluators.structure import StructurePrediction
from isg.gateway import Gateway, extract_json
from isg.prompts import (
    IMAGE_QUESTION_PROMPT,
    IMAGE_REQUIREMENT_FEW_SHOT,
    IMAGE_REQUIREMENT_LEVEL_HINTS,
    IMAGE_REQUIREMENT_PROMPT,
    IMAGE_VQA_PROMPT,
)

logger = logging.getLogger(__name__)


class ImageRequirement(str, Enum):
    FULL = "full"
    HALF = "half"
    EMPTY = "empty"


class TupleKind(str, Enum):
    ENTITY = "entity"
    ATTRIBUTE = "attribute"
    RELATION = "relation"


_ARITY = {TupleKind.ENTITY: 3, TupleKind.ATTRIBUTE: 4, TupleKind.RELATION: 5}


class ImageTuple(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: TupleKind
    name: str
    entity: Optional[str] = None
    entity1: Optional[str] = None
    entity2: Optional[str] = None
    image: ContentToken

    @model_validator(mode="after")
    def _check_arity(self) -> "ImageTuple":
        if self.image.scope is not TokenScope.GEN or self.image.kind is not BlockKind.IMAGE:
            raise ValueError(f"{self.image} is not a generated image token")
        present = (self.entity is not None, self.entity1 is not None, self.entity2 is not None)
        expected = {
            TupleKind.ENTITY: (False, False, False),
            TupleKind.ATTRIBUTE: (True, False, False),
            TupleKind.RELATION: (False, True, True),
        }[self.kind]
        if present != expected:
            raise ValueError(f"{self.kind.value} tuple has the wrong fields")
        return self

    @classmethod
    def from_list(cls, raw: Any) -> "ImageTuple":
        """Parse ["entity", name, img] / ["attribute", name, entity, img] / ["relation", name, e1, e2, img]."""
        if not isinstance(raw, (list, tuple)) or not raw or not all(isinstance(x, str) for x in raw):
            raise ValueError(f"not a tuple of strings: {raw!r}")
        kind = TupleKind(raw[0].strip().lower())
        if len(raw) != _ARITY[kind]:
            raise ValueError(f"{kind.value} tuple needs {_ARITY[kind]} fields, got {len(raw)}")
        fields = [collapse_whitespace(x) for x in raw[1:-1]]
        image = ContentToken.parse(raw[-1])
        if kind is TupleKind.ENTITY:
            return cls(kind=kind, name=fields[0], image=image)
        if kind is TupleKind.ATTRIBUTE:
            return cls(kind=kind, name=fields[0], entity=fields[1], image=image)
        return cls(kind=kind, name=fields[0], entity1=fields[1], entity2=fields[2], image=image)

    def to_list(self) -> list[str]:
        middle = {
            TupleKind.ENTITY: [self.name],
            TupleKind.ATTRIBUTE: [self.name, self.entity],
            TupleKind.RELATION: [self.name, self.entity1, self.entity2],
        }[self.kind]
        return [self.kind.value, *middle, str(self.image)]

    def required_entities(self) -> list[str]:
        if self.kind is TupleKind.ATTRIBUTE:
            return [self.entity]
        if self.kind is TupleKind.RELATION:
            return [self.entity1, self.entity2]
        return []


class ImageQuestion(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    image: ContentToken
    question: str
    preliminaries: tuple[int, ...] = ()
    source: Optional[ImageTuple] = None


class ImageOutcome(str, Enum):
    YES = "yes"
    NO = "no"
    GATED_NO = "gated_no"


class ImageVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    outcome: ImageOutcome
    reason: str = ""
    judged: bool = False


class ImageLevelResult(BaseModel):
    """Everything the image level produced for one sample; written as image.json."""

    requirement: ImageRequirement
    score: Optional[float]
    tuples: list[ImageTuple] = []
    questions: list[ImageQuestion] = []
    verdicts: list[ImageVerdict] = []
    failures: list[Failure] = []
    skipped: Optional[str] = None

    @property
    def absent(self) -> bool:
        return self.score is None


# --- operations ---


async def extract_image_tuples(
    query: InterleavedSequence,
    pred: StructurePrediction,
    gateway: Gateway,
    few_shot: bool = True,
    with_images: bool = True,
    requirement: ImageRequirement = ImageRequirement.FULL,
) -> list[ImageTuple]:
    """
    Predict entities, attributes and relations for each generated image.

    Malformed entries and tuples naming images the structure does not predict are dropped.

    Raises:
        ExtractionFailed: reply has no parseable "tuple" list
    """
    role_prompt = IMAGE_REQUIREMENT_PROMPT
    if few_shot:
        role_prompt = f"{role_prompt}\n\n{IMAGE_REQUIREMENT_FEW_SHOT}"
    request = gateway.request(
        role_prompt,
        f"Requirement level: {IMAGE_REQUIREMENT_LEVEL_HINTS[requirement.value]}",
        "Here is the query:",
        *labelled_parts(query, TokenScope.QUERY, with_images=with_images),
        f"Here is the element sequence:\n{pred.describe()}",
    )
    response = await gateway.complete(request, purpose="image.extract")
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise ExtractionFailed(str(e)) from e
    entries = None
    if isinstance(data, dict):
        lowered = {str(k).lower(): v for k, v in data.items()}
        entries = lowered.get("tuple", lowered.get("tuples"))
    if not isinstance(entries, list):
        raise ExtractionFailed("image requirement reply has no 'tuple' list")

    images = set(pred.gen_images())
    tuples: list[ImageTuple] = []
    for entry in entries:
        try:
            parsed = ImageTuple.from_list(entry)
        except (InvalidToken, ValidationError, ValueError) as e:
            logger.warning(f"Dropping malformed image tuple {entry!r}: {e}")
            continue
        if parsed.image not in images:
            logger.warning(f"Dropping tuple for unpredicted image {parsed.image}")
            continue
        if parsed not in tuples:
            tuples.append(parsed)
    return tuples


def _question_id(raw: Any) -> int:
    """Question ids are integers, possibly written as digit strings."""
    if isinstance(raw, int) and not isinstance(raw, bool):
        return raw
    if isinstance(raw, str) and raw.strip().lstrip("-").isdigit():
        return int(raw)
    raise ValueError(f"bad question id {raw!r}")


def _parse_question(entry: Any) -> tuple[int, ImageQuestion, Optional[ImageTuple]]:
    if not isinstance(entry, dict):
        raise ValueError("question entry is not an object")
    lowered = {str(k).lower(): v for k, v in entry.items()}
    qid = _question_id(lowered.get("id"))
    prelims = lowered.get("preliminary", lowered.get("preliminaries", []))
    if not isinstance(prelims, list):
        raise ValueError("Preliminary must be a list of ids")
    echoed = None
    if lowered.get("tuple") is not None:
        try:
            echoed = ImageTuple.from_list(lowered["tuple"])
        except (InvalidToken, ValidationError, ValueError):
            echoed = None
    question = ImageQuestion(
        id=qid,
        image=ContentToken.parse(lowered.get("image")),
        question=str(lowered.get("question", "")).strip(),
        preliminaries=tuple(_question_id(p) for p in prelims),
    )
    if not question.question:
        raise ValueError("empty question")
    return qid, question, echoed


def _repair_entity_links(
    questions: dict[int, ImageQuestion], sources: dict[int, ImageTuple]
) -> dict[int, ImageQuestion]:
    """Make attribute/relation questions list the questions about their entities."""
    entity_question = {}
    for qid, source in sources.items():
        if source.kind is TupleKind.ENTITY:
            entity_question.setdefault((source.name.lower(), source.image), qid)
    repaired = {}
    for qid, question in questions.items():
        source = sources.get(qid)
        prelims = list(question.preliminaries)
        if source is not None:
            for entity in source.required_entities():
                needed = entity_question.get((entity.lower(), source.image))
                if needed is not None and needed not in prelims:
                    prelims.append(needed)
        repaired[qid] = question.model_copy(
            update={"preliminaries": tuple(prelims), "source": source}
        )
    return repaired


def order_question_dag(questions: dict[int, ImageQuestion]) -> list[ImageQuestion]:
    """
    Topologically order questions and renumber them from 0.

    Questions citing unknown ids (or themselves) are dropped, transitively, and so
    are questions caught in cycles.
    """
    alive = dict(questions)
    changed = True
    while changed:
        changed = False
        for qid in sorted(alive):
            prelims = alive[qid].preliminaries
            if any(p == qid or p not in alive for p in prelims):
                logger.warning(f"Dropping image question {qid}: unknown preliminary in {list(prelims)}")
                del alive[qid]
                changed = True

    ordered: list[int] = []
    placed: set[int] = set()
    while True:
        ready = [
            qid
            for qid in sorted(alive)
            if qid not in placed and all(p in placed for p in alive[qid].preliminaries)
        ]
        if not ready:
            break
        ordered.extend(ready)
        placed.update(ready)
    for qid in sorted(set(alive) - placed):
        logger.warning(f"Dropping image question {qid}: cyclic preliminaries")

    # cycle members may have been cited by placed questions; placed ones only cite placed
    renumber = {old: new for new, old in enumerate(ordered)}
    return [
        alive[old].model_copy(
            update={
                "id": renumber[old],
                "preliminaries": tuple(sorted(renumber[p] for p in set(alive[old].preliminaries))),
            }
        )
        for old in ordered
    ]


async def generate_image_questions(
    tuples: list[ImageTuple], gateway: Gateway
) -> list[ImageQuestion]:
    """
    Write one yes/no question per tuple with its prerequisite question ids.

    Raises:
        EmptyInput: no tuples
        GenerationFailed: reply has no parseable list
    """
    if not tuples:
        raise EmptyInput("generate_image_questions needs at least one tuple")
    payload = json.dumps([t.to_list() for t in tuples], ensure_ascii=False)
    request = gateway.request(IMAGE_QUESTION_PROMPT, f"Here is the input:\n{payload}")
    response = await gateway.complete(request, purpose="image.questions")
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise GenerationFailed(str(e)) from e
    if isinstance(data, dict):
        data = next((v for v in data.values() if isinstance(v, list)), None)
    if not isinstance(data, list):
        raise GenerationFailed("image question reply is not a list")

    questions: dict[int, ImageQuestion] = {}
    sources: dict[int, ImageTuple] = {}
    positional = len(data) == len(tuples)
    for position, entry in enumerate(data):
        try:
            qid, question, echoed = _parse_question(entry)
        except (InvalidToken, ValidationError, ValueError) as e:
            logger.warning(f"Dropping malformed image question {entry!r}: {e}")
            continue
        if qid in questions:
            logger.warning(f"Dropping image question with duplicate id {qid}")
            continue
        source = echoed if echoed in tuples else (tuples[position] if positional else None)
        if source is not None and source.image != question.image:
            source = None
        questions[qid] = question
        if source is not None:
            sources[qid] = source

    return order_question_dag(_repair_entity_links(questions, sources))


async def _judge_image_question(
    q: ImageQuestion, query: InterleavedSequence, answer: InterleavedSequence, gateway: Gateway
) -> ImageVerdict:
    try:
        block = resolve_token(q.image, query, answer)
    except TokenOutOfRange:
        return ImageVerdict(id=q.id, outcome=ImageOutcome.NO, reason="missing image")
    request = gateway.request(IMAGE_VQA_PROMPT, block.image, f"Here is the question: {q.question}")
    response = await gateway.complete(request, purpose="image.judge")
    try:
        judge, reason = parse_judge_reply(response.text)
        outcome = ImageOutcome.YES if parse_yes_no(judge) else ImageOutcome.NO
        return ImageVerdict(id=q.id, outcome=outcome, reason=reason, judged=True)
    except UnparseableJudgment as e:
        logger.warning(f"Unparseable image judgment for question {q.id}: {e}")
        return ImageVerdict(
            id=q.id, outcome=ImageOutcome.NO, reason=f"unparseable judgment: {e}", judged=True
        )


async def evaluate_question_dag(
    questions: list[ImageQuestion],
    query: InterleavedSequence,
    answer: InterleavedSequence,
    gateway: Gateway,
) -> list[ImageVerdict]:
    """
    Judge the question DAG wave by wave.

    A question is sent to the VQA model only when all its preliminaries were
    answered Yes; otherwise it is GATED_NO without a call. Questions whose
    preliminaries are settled are judged concurrently.
    """
    by_id = {q.id: q for q in questions}
    verdicts: dict[int, ImageVerdict] = {}
    while len(verdicts) < len(by_id):
        wave = [
            q
            for qid, q in sorted(by_id.items())
            if qid not in verdicts and all(p in verdicts for p in q.preliminaries)
        ]
        if not wave:
            # unreachable for ordered DAGs; guards hand-built inputs
            for qid in sorted(set(by_id) - set(verdicts)):
                verdicts[qid] = ImageVerdict(
                    id=qid, outcome=ImageOutcome.GATED_NO, reason="unresolved preliminaries"
                )
            break
        to_judge = []
        for q in wave:
            failed = [p for p in q.preliminaries if verdicts[p].outcome is not ImageOutcome.YES]
            if failed:
                verdicts[q.id] = ImageVerdict(
                    id=q.id, outcome=ImageOutcome.GATED_NO, reason=f"preliminary {failed} not Yes"
                )
            else:
                to_judge.append(q)
        results = await asyncio.gather(
            *(_judge_image_question(q, query, answer, gateway) for q in to_judge)
        )
        for verdict in results:
            verdicts[verdict.id] = verdict
    return [verdicts[qid] for qid in sorted(verdicts)]


def score_image_level(verdicts: list[ImageVerdict]) -> float:
    if not verdicts:
        return 0.0
    return sum(1 for v in verdicts if v.outcome is ImageOutcome.YES) / len(verdicts)


async def evaluate_image_level(
    query: InterleavedSequence,
    answer: InterleavedSequence,
    pred: StructurePrediction,
    gateway: Gateway,
    requirement: ImageRequirement = ImageRequirement.FULL,
    few_shot: bool = True,
    with_images: bool = True,
) -> ImageLevelResult:
    if requirement is ImageRequirement.EMPTY:
        return ImageLevelResult(requirement=requirement, score=None, skipped="no image requirement")

    try:
        tuples = await extract_image_tuples(query, pred, gateway, few_shot, with_images, requirement)
    except ExtractionFailed as e:
        logger.warning(f"Image requirement extraction failed: {e}")
        return ImageLevelResult(requirement=requirement, score=0.0, failures=[Failure.of("image", e)])

    failures: list[Failure] = []
    questions: list[ImageQuestion] = []
    if tuples:
        try:
            questions = await generate_image_questions(tuples, gateway)
        except GenerationFailed as e:
            logger.warning(f"Image question generation failed: {e}")
            failures.append(Failure.of("image", e))

    verdicts = await evaluate_question_dag(questions, query, answer, gateway)
    return ImageLevelResult(
        requirement=requirement,
        score=score_image_level(verdicts),
        tuples=tuples,
        questions=questions,
        verdicts=verdicts,
        failures=failures,
    )
