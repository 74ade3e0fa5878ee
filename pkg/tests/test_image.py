import asyncio
import itertools

import pytest

from isg.content import ContentToken, InterleavedSequence
from isg.errors import EmptyInput, ExtractionFailed
from isg.evaluators.image import (
    ImageOutcome,
    ImageQuestion,
    ImageRequirement,
    ImageTuple,
    TupleKind,
    evaluate_image_level,
    evaluate_question_dag,
    extract_image_tuples,
    generate_image_questions,
    order_question_dag,
    score_image_level,
)
from isg.evaluators.structure import StructurePrediction
from isg.gateway import MockBackend, ModelGateway

from tests.conftest import png_ref, scripted_gateway

IMG1 = ContentToken.parse("<gen_img1>")
QUERY = InterleavedSequence.of("Draw an orange sky over a calm sea.")
PREDICTION = StructurePrediction.from_reply({"Query": ["<query_text1>"], "Answer": ["<gen_img1>"]})


def question(qid: int, *prelims: int, image: ContentToken = IMG1) -> ImageQuestion:
    return ImageQuestion(id=qid, image=image, question=f"Is check {qid} true?", preliminaries=prelims)


def test_tuple_parsing_by_arity():
    entity = ImageTuple.from_list(["entity", "sky", "<gen_img1>"])
    attribute = ImageTuple.from_list(["Attribute", "orange", "sky", "<gen_img1>"])
    relation = ImageTuple.from_list(["relation", "above", "sky", "sea", "<gen_img1>"])
    assert entity.kind is TupleKind.ENTITY
    assert attribute.required_entities() == ["sky"]
    assert relation.required_entities() == ["sky", "sea"]
    assert relation.to_list() == ["relation", "above", "sky", "sea", "<gen_img1>"]


@pytest.mark.parametrize(
    "raw",
    [
        ["entity", "sky", "sea", "<gen_img1>"],
        ["attribute", "orange", "<gen_img1>"],
        ["entity", "sky", "<query_img1>"],
        ["colour", "sky", "<gen_img1>"],
        "entity sky",
    ],
)
def test_tuple_parsing_rejects_malformed(raw):
    with pytest.raises(ValueError):
        ImageTuple.from_list(raw)


def test_extraction_drops_unpredicted_images():
    gateway = scripted_gateway(
        rules=[
            {
                "purpose": "image.extract",
                "response": {
                    "tuple": [
                        ["entity", "sky", "<gen_img1>"],
                        ["entity", "sea", "<gen_img2>"],
                        ["entity", "sky", "<gen_img1>"],
                        ["attribute", "orange"],
                    ]
                },
            }
        ]
    )
    tuples = asyncio.run(extract_image_tuples(QUERY, PREDICTION, gateway, requirement=ImageRequirement.HALF))
    assert [t.to_list() for t in tuples] == [["entity", "sky", "<gen_img1>"]]


def test_extraction_without_tuple_list_fails():
    gateway = scripted_gateway(rules=[{"purpose": "image.extract", "response": ["entity", "sky"]}])
    with pytest.raises(ExtractionFailed):
        asyncio.run(extract_image_tuples(QUERY, PREDICTION, gateway))


def test_order_question_dag_drops_bad_links_and_renumbers():
    questions = {
        5: question(5),
        7: question(7, 5),
        8: question(8, 99),
        9: question(9, 8),
        10: question(10, 10),
        11: question(11, 12),
        12: question(12, 11),
        13: question(13, 7, 5),
    }
    ordered = order_question_dag(questions)
    assert [q.question for q in ordered] == ["Is check 5 true?", "Is check 7 true?", "Is check 13 true?"]
    assert [q.id for q in ordered] == [0, 1, 2]
    assert [q.preliminaries for q in ordered] == [(), (0,), (0, 1)]


def test_generated_questions_link_attributes_to_their_entity():
    tuples = [
        ImageTuple.from_list(["entity", "sky", "<gen_img1>"]),
        ImageTuple.from_list(["attribute", "orange", "sky", "<gen_img1>"]),
    ]
    gateway = scripted_gateway(
        rules=[
            {
                "purpose": "image.questions",
                "response": [
                    {"image": "<gen_img1>", "tuple": ["entity", "sky", "<gen_img1>"], "Question": "Is there a sky?", "id": 1, "Preliminary": []},
                    {"image": "<gen_img1>", "tuple": ["attribute", "orange", "sky", "<gen_img1>"], "Question": "Is the sky orange?", "id": 2, "Preliminary": []},
                ],
            }
        ]
    )
    questions = asyncio.run(generate_image_questions(tuples, gateway))
    assert [(q.id, q.preliminaries) for q in questions] == [(0, ()), (1, (0,))]
    assert questions[1].source == tuples[1]


def test_questions_with_unusable_ids_are_dropped():
    gateway = scripted_gateway(
        rules=[
            {"purpose": "image.extract", "response": {"tuple": [["entity", "sky", "<gen_img1>"], ["attribute", "orange", "sky", "<gen_img1>"]]}},
            {
                "purpose": "image.questions",
                "response": [
                    {"image": "<gen_img1>", "Question": "Is there a sky?", "id": "1", "Preliminary": []},
                    {"image": "<gen_img1>", "Question": "Is the sky orange?", "id": 2, "Preliminary": [None]},
                    {"image": "<gen_img1>", "Question": "Is the sky wide?", "id": 3, "Preliminary": [[1]]},
                    {"image": "<gen_img1>", "Question": "Is the sky clear?", "id": None, "Preliminary": []},
                    {"image": "<gen_img1>", "Question": "Is the sky bright?", "id": 4, "Preliminary": [1.5]},
                ],
            },
            {"purpose": "image.judge", "response": {"Judge": "Yes"}},
        ]
    )
    result = asyncio.run(evaluate_image_level(QUERY, InterleavedSequence.of(png_ref(1)), PREDICTION, gateway))
    assert [q.question for q in result.questions] == ["Is there a sky?"]
    assert result.score == 1.0
    assert result.failures == []


def test_generate_image_questions_needs_tuples():
    with pytest.raises(EmptyInput):
        asyncio.run(generate_image_questions([], scripted_gateway()))


def _dags(n: int):
    pairs = [(i, j) for j in range(n) for i in range(j)]
    for mask in itertools.product((False, True), repeat=len(pairs)):
        yield {j: tuple(i for (i, jj), on in zip(pairs, mask) if on and jj == j) for j in range(n)}


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_gating_over_every_small_dag(n):
    answer = InterleavedSequence.of(png_ref(1))

    async def check_all():
        checked = 0
        for prelims in _dags(n):
            questions = [question(qid, *prelims[qid]) for qid in range(n)]
            for replies in itertools.product((True, False), repeat=n):
                backend = MockBackend(
                    rules=[
                        {"purpose": "image.judge", "contains": f"check {qid} true", "response": {"Judge": "Yes" if yes else "No"}}
                        for qid, yes in enumerate(replies)
                    ]
                )
                gateway = ModelGateway(backend, retries=0)
                verdicts = await evaluate_question_dag(questions, QUERY, answer, gateway)

                expected: dict[int, ImageOutcome] = {}
                for qid in range(n):
                    if any(expected[p] is not ImageOutcome.YES for p in prelims[qid]):
                        expected[qid] = ImageOutcome.GATED_NO
                    else:
                        expected[qid] = ImageOutcome.YES if replies[qid] else ImageOutcome.NO
                assert [v.outcome for v in verdicts] == [expected[qid] for qid in range(n)]
                assert all(v.judged == (v.outcome is not ImageOutcome.GATED_NO) for v in verdicts)
                assert backend.count("image.judge") == sum(
                    1 for outcome in expected.values() if outcome is not ImageOutcome.GATED_NO
                )
                checked += 1
        return checked

    assert asyncio.run(check_all()) == 2 ** (n * (n - 1) // 2) * 2**n


def test_missing_image_is_no_without_a_call():
    gateway = scripted_gateway()
    image2 = ContentToken.parse("<gen_img2>")
    verdicts = asyncio.run(
        evaluate_question_dag([question(0, image=image2)], QUERY, InterleavedSequence.of(png_ref(1)), gateway)
    )
    assert verdicts[0].outcome is ImageOutcome.NO
    assert not verdicts[0].judged
    assert gateway.backend.count() == 0


def test_score_image_level():
    gateway = scripted_gateway(
        rules=[
            {"purpose": "image.judge", "contains": "check 0 true", "response": {"Judge": "Yes"}},
            {"purpose": "image.judge", "response": {"Judge": "No"}},
        ]
    )
    verdicts = asyncio.run(
        evaluate_question_dag([question(0), question(1), question(2, 1)], QUERY, InterleavedSequence.of(png_ref(1)), gateway)
    )
    assert score_image_level(verdicts) == pytest.approx(1 / 3)
    assert score_image_level([]) == 0.0


def test_empty_requirement_is_absent_without_calls():
    gateway = scripted_gateway()
    result = asyncio.run(
        evaluate_image_level(
            QUERY, InterleavedSequence.of(png_ref(1)), PREDICTION, gateway, requirement=ImageRequirement.EMPTY
        )
    )
    assert result.score is None
    assert result.absent
    assert gateway.backend.count() == 0


def test_extraction_failure_scores_zero():
    gateway = scripted_gateway(rules=[{"purpose": "image.extract", "response": "nothing to check"}])
    result = asyncio.run(evaluate_image_level(QUERY, InterleavedSequence.of(png_ref(1)), PREDICTION, gateway))
    assert result.score == 0.0
    assert [f.code for f in result.failures] == ["extraction_failed"]
