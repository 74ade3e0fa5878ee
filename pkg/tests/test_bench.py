import asyncio
import json
import random
from pathlib import Path

import pytest

from isg.bench import (
    EVALUATION_ERROR,
    MISSING,
    BlockReport,
    HolisticReport,
    ImageReport,
    ModalityClass,
    Sample,
    SampleReport,
    StructuralReport,
    aggregate,
    emit_report,
    evaluate_corpus,
    evaluate_sample,
    load_answer,
    load_corpus,
    render_markdown,
)
from isg.config import EvalConfig, Level, RunConfig, VqaMode, load_run_config
from isg.content import BlockKind, InterleavedSequence
from isg.errors import DuplicateSampleId, EmptyInput, MissingAnswer, SchemaViolation
from isg.evaluators.image import ImageRequirement
from isg.gateway import MockBackend, ModelGateway

from tests.conftest import png_ref


def fixture_gateway(fixtures_dir: Path) -> ModelGateway:
    return ModelGateway(MockBackend.from_fixture(fixtures_dir / "mock_judge.json"), retries=0)


def fixture_sample(fixtures_dir: Path, sample_id: str) -> Sample:
    return next(s for s in load_corpus(fixtures_dir / "corpus") if s.id == sample_id)


def write_sample(corpus: Path, name: str, **overrides) -> Path:
    document = {
        "id": name,
        "category": "Image-Text Complementation",
        "subcategory": "HowTo",
        "modality_class": "both",
        "image_requirement": "empty",
        "query": {"blocks": [{"type": "text", "content": "How do I tie a bowline?"}]},
        "golden": {"blocks": [{"type": "text", "content": "Make a loop."}]},
    }
    document.update(overrides)
    path = corpus / "samples" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


# --- corpus ---


def test_load_fixture_corpus(fixtures_dir: Path):
    samples = load_corpus(fixtures_dir / "corpus")
    assert [s.id for s in samples] == [f"{n:04d}" for n in range(1, 9)]
    assert len({s.category for s in samples}) == 8
    assert {s.modality_class for s in samples} == set(ModalityClass)
    assert samples[2].image_requirement is ImageRequirement.FULL
    assert samples[2].query.images[0].read_bytes().startswith(b"\x89PNG")


def test_missing_field_is_schema_violation(tmp_path: Path):
    write_sample(tmp_path, "0001")
    path = tmp_path / "samples" / "0002.json"
    path.write_text(json.dumps({"id": "0002", "category": "Image-Text Complementation"}), encoding="utf-8")
    with pytest.raises(SchemaViolation) as info:
        load_corpus(tmp_path)
    assert info.value.field == "subcategory"
    assert info.value.file == str(path)


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"category": "Cooking"}, "category"),
        ({"subcategory": "Art Style Transfer"}, "subcategory"),
        ({"modality_class": "vision"}, "modality_class"),
        ({"image_requirement": "full"}, "image_requirement"),
        ({"query": {"blocks": [{"type": "image", "path": "missing.png"}]}}, "query"),
    ],
)
def test_inconsistent_sample_is_rejected(tmp_path: Path, overrides, field):
    write_sample(tmp_path, "0001", **overrides)
    with pytest.raises(SchemaViolation) as info:
        load_corpus(tmp_path)
    assert info.value.field == field


def test_duplicate_sample_ids(tmp_path: Path):
    write_sample(tmp_path, "a")
    write_sample(tmp_path, "b", id="a")
    with pytest.raises(DuplicateSampleId) as info:
        load_corpus(tmp_path)
    assert info.value.sample_id == "a"


def test_load_answer_missing(tmp_path: Path):
    with pytest.raises(MissingAnswer):
        load_answer(tmp_path, "0001")


# --- per-sample evaluation ---


@pytest.mark.parametrize("mode, block_minimum", [(VqaMode.SCORE, 1.0), (VqaMode.YES_NO, 0.0)])
def test_structure_mismatch_takes_minimum_without_block_or_image_calls(fixtures_dir: Path, mode, block_minimum):
    sample = fixture_sample(fixtures_dir, "0003")
    answer = load_answer(fixtures_dir / "answers", sample.id)
    gateway = fixture_gateway(fixtures_dir)

    report = asyncio.run(evaluate_sample(sample, answer, gateway, EvalConfig(vqa_mode=mode)))
    assert not report.structural.matched
    assert report.structural.predicted == "I"
    assert report.structural.actual == "T"
    assert report.block.score == block_minimum
    assert report.image.score == 0.0
    assert report.holistic is not None
    assert gateway.backend.count("block.") == 0
    assert gateway.backend.count("image.") == 0
    assert gateway.backend.count("holistic") == 1


def test_matching_sample_scores_maximum(fixtures_dir: Path, tmp_path: Path):
    sample = fixture_sample(fixtures_dir, "0001")
    answer = load_answer(fixtures_dir / "answers", sample.id)
    report = asyncio.run(evaluate_sample(sample, answer, fixture_gateway(fixtures_dir), EvalConfig(), tmp_path))

    assert report.structural.matched
    assert report.block.score == 10.0
    assert report.image.score == 1.0
    assert report.holistic.overall == 10
    assert report.failures == []
    assert (tmp_path / "samples" / "0001" / "image.json").exists()
    assert report.block.artifact == "samples/0001/block.json"
    assert report.usage["block"].total > 0


def test_missing_answer_is_flagged_and_makes_no_calls(fixtures_dir: Path, corpus_copy: Path):
    (corpus_copy / "answers" / "0002.json").unlink()
    gateway = fixture_gateway(fixtures_dir)
    run_config = load_run_config(fixtures_dir / "config.toml")

    run = asyncio.run(evaluate_corpus(load_corpus(corpus_copy / "corpus"), corpus_copy / "answers", gateway, run_config))
    missing = next(r for r in run.samples if r.sample_id == "0002")
    assert missing.flags == [MISSING]
    assert missing.block.score == 1.0
    assert missing.image.absent
    assert missing.holistic.flagged and missing.holistic.overall == 1
    assert not [e for e in gateway.ledger.entries if e.sample_id == "0002"]


def test_answer_with_unreadable_image_scores_as_missing(fixtures_dir: Path, corpus_copy: Path):
    path = corpus_copy / "answers" / "0001.json"
    document = json.loads(path.read_text(encoding="utf-8"))
    document["blocks"][0]["path"] = "gone.png"
    path.write_text(json.dumps(document), encoding="utf-8")

    with pytest.raises(MissingAnswer):
        load_answer(corpus_copy / "answers", "0001")

    gateway = fixture_gateway(fixtures_dir)
    run_config = load_run_config(fixtures_dir / "config.toml")
    run = asyncio.run(evaluate_corpus(load_corpus(corpus_copy / "corpus"), corpus_copy / "answers", gateway, run_config))
    broken = next(r for r in run.samples if r.sample_id == "0001")
    assert broken.flags == [MISSING]
    assert "unreadable image 1" in broken.failures[0].message
    assert not [e for e in gateway.ledger.entries if e.sample_id == "0001"]
    assert next(r for r in run.samples if r.sample_id == "0002").holistic.overall == 10


class CrashingBackend(MockBackend):
    async def send(self, req, fingerprint, purpose):
        if "sunset over the sea" in req.text:
            raise RuntimeError("judge crashed")
        return await super().send(req, fingerprint, purpose)


def test_unexpected_error_in_one_sample_keeps_the_others(fixtures_dir: Path):
    gateway = ModelGateway(CrashingBackend.from_fixture(fixtures_dir / "mock_judge.json"), retries=0)
    run_config = load_run_config(fixtures_dir / "config.toml")
    samples = load_corpus(fixtures_dir / "corpus")
    run = asyncio.run(evaluate_corpus(samples, fixtures_dir / "answers", gateway, run_config))

    crashed = next(r for r in run.samples if r.sample_id == "0001")
    assert crashed.flags == [EVALUATION_ERROR]
    assert [f.code for f in crashed.failures] == ["evaluation_error"]
    assert "judge crashed" in crashed.failures[0].message
    assert crashed.holistic.flagged
    assert run.failures_by_category[crashed.category] == {"evaluation_error": 1}
    others = [r for r in run.samples if r.sample_id != "0001"]
    assert all(r.flags == [] for r in others)
    assert run.levels["holistic"].count == len(samples)


# --- oracle equivalence on random micro-samples ---


def _layout(rng: random.Random, size: int) -> list[BlockKind]:
    kinds: list[BlockKind] = []
    for _ in range(size):
        if kinds and kinds[-1] is BlockKind.TEXT:
            kinds.append(BlockKind.IMAGE)
        else:
            kinds.append(rng.choice((BlockKind.TEXT, BlockKind.IMAGE)))
    return kinds


def _tokens(kinds: list[BlockKind]) -> list[str]:
    counters = {BlockKind.TEXT: 0, BlockKind.IMAGE: 0}
    tokens = []
    for kind in kinds:
        counters[kind] += 1
        tokens.append(f"<gen_{'text' if kind is BlockKind.TEXT else 'img'}{counters[kind]}>")
    return tokens


def _micro_case(rng: random.Random, case: int):
    actual = _layout(rng, rng.randint(1, 6))
    predicted = actual if rng.random() < 0.75 else _layout(rng, rng.randint(1, 6))
    mode = rng.choice((VqaMode.SCORE, VqaMode.YES_NO))
    answer_blocks = [f"text {case}.{i}" if kind is BlockKind.TEXT else png_ref(i) for i, kind in enumerate(actual)]
    answer = InterleavedSequence.of(*answer_blocks)
    tokens = _tokens(predicted)
    images = [t for t in tokens if "img" in t]

    pairs = [(s, o) for s in tokens + ["<query_text1>"] for o in tokens if s != o]
    rng.shuffle(pairs)
    triplets = pairs[: rng.randint(0, 5)]
    block_verdicts = [rng.randint(1, 10) if mode is VqaMode.SCORE else rng.random() < 0.5 for _ in triplets]

    image_questions = []
    if images:
        for i in range(rng.randint(0, 5)):
            prelims = [p for p in range(i) if rng.random() < 0.3]
            image_questions.append((rng.choice(images), prelims, rng.random() < 0.6))

    rules: list[dict] = [
        {"purpose": "structure", "response": {"Query": ["<query_text1>"], "Answer": tokens}},
        {"purpose": "block.extract", "response": {"relation": [[s, o, f"relation r{i}"] for i, (s, o) in enumerate(triplets)]}},
        {
            "purpose": "block.questions",
            "response": [
                {"subject": s, "object": o, "relation": f"relation r{i}", "Question": f"Is requirement q{i} met?"}
                for i, (s, o) in enumerate(triplets)
            ],
        },
        {
            "purpose": "image.extract",
            "response": {"tuple": [["entity", f"thing{i}", image] for i, (image, _, _) in enumerate(image_questions)]},
        },
        {
            "purpose": "image.questions",
            "response": [
                {"image": image, "tuple": ["entity", f"thing{i}", image], "Question": f"Is visual check v{i} true?", "id": i, "Preliminary": prelims}
                for i, (image, prelims, _) in enumerate(image_questions)
            ],
        },
    ]
    for i, verdict in enumerate(block_verdicts):
        judge = verdict if mode is VqaMode.SCORE else ("Yes" if verdict else "No")
        rules.append({"purpose": "block.judge", "contains": f"Is requirement q{i} met?", "response": {"Judge": judge}})
    for i, (_, _, yes) in enumerate(image_questions):
        rules.append({"purpose": "image.judge", "contains": f"Is visual check v{i} true?", "response": {"Judge": "Yes" if yes else "No"}})

    # brute force
    if predicted != actual:
        expected_block = 1.0 if mode is VqaMode.SCORE else 0.0
        expected_image = 0.0
    else:
        values = [float(v) if mode is VqaMode.SCORE else (1.0 if v else 0.0) for v in block_verdicts]
        expected_block = sum(values) / len(values) if values else (1.0 if mode is VqaMode.SCORE else 0.0)
        passed: list[bool] = []
        for _, prelims, yes in image_questions:
            passed.append(all(passed[p] for p in prelims) and yes)
        expected_image = sum(passed) / len(passed) if passed else 0.0

    sample = Sample(
        id=f"m{case:04d}",
        category="Temporal Prediction",
        subcategory="Real-world Simulation",
        modality_class=ModalityClass.BOTH,
        image_requirement=ImageRequirement.FULL,
        query=InterleavedSequence.of(f"Micro query {case}"),
        golden=InterleavedSequence.of(f"Micro golden {case}"),
    )
    return sample, answer, mode, rules, predicted == actual, expected_block, expected_image


def test_scores_match_brute_force_oracle():
    rng = random.Random(20240617)

    async def run_cases():
        for case in range(1000):
            sample, answer, mode, rules, matched, expected_block, expected_image = _micro_case(rng, case)
            gateway = ModelGateway(MockBackend(rules=rules), retries=0)
            cfg = EvalConfig(vqa_mode=mode, levels=(Level.BLOCK, Level.IMAGE))
            report = await evaluate_sample(sample, answer, gateway, cfg)
            assert report.structural.matched == matched, case
            assert report.block.score == expected_block, case
            assert report.image.score == expected_image, case
            assert report.holistic is None

    asyncio.run(run_cases())


# --- aggregation and reports ---


def _report(sample_id, category, subcategory, modality, block, image, holistic=None):
    return SampleReport(
        sample_id=sample_id,
        category=category,
        subcategory=subcategory,
        modality_class=modality,
        structural=StructuralReport(matched=block > 1, actual="I"),
        block=BlockReport(score=block, mode=VqaMode.SCORE),
        image=ImageReport(score=image, absent=image is None),
        holistic=None if holistic is None else HolisticReport(overall=holistic, dimensions={}),
    )


def test_aggregate_groups_and_skips_absent_images():
    reports = [
        _report("3", "Style Transfer", "Art Style Transfer", ModalityClass.VISION, 9.0, 1.0, 8),
        _report("1", "Style Transfer", "Photo Variation", ModalityClass.VISION, 5.0, 0.5, 6),
        _report("2", "Image-Text Complementation", "HowTo", ModalityClass.BOTH, 1.0, None, 4),
    ]
    run = aggregate(reports, {"vqa_mode": "score"})

    assert [r.sample_id for r in run.samples] == ["1", "2", "3"]
    block = run.levels["block"]
    assert block.by_category == {"Image-Text Complementation": 1.0, "Style Transfer": 7.0}
    assert block.by_subcategory["Photo Variation"] == 5.0
    assert block.avg_by_category == 4.0
    assert block.avg_by_sample == 5.0

    image = run.levels["image"]
    assert image.count == 2
    assert image.by_modality == {"vision": 0.75}
    assert "Image-Text Complementation" not in image.by_category

    assert run.levels["structural"].avg_by_sample == pytest.approx(2 / 3)
    assert run.levels["holistic"].avg_by_category == 5.5
    assert run.config == {"vqa_mode": "score"}


def test_aggregate_needs_reports():
    with pytest.raises(EmptyInput):
        aggregate([])


def _full_run(fixtures_dir: Path, out: Path):
    gateway = fixture_gateway(fixtures_dir)
    run_config = load_run_config(fixtures_dir / "config.toml")
    samples = load_corpus(fixtures_dir / "corpus")
    run = asyncio.run(evaluate_corpus(samples, fixtures_dir / "answers", gateway, run_config, out))
    emit_report(run, out, ("markdown", "ledger"), ledger=gateway.ledger)
    return run, gateway


def test_fixture_corpus_scores(fixtures_dir: Path, tmp_path: Path):
    run, _ = _full_run(fixtures_dir, tmp_path)
    assert run.levels["structural"].avg_by_sample == 0.75
    assert run.levels["block"].avg_by_sample == 7.75
    assert run.levels["block"].by_modality["language"] == 10.0
    assert run.levels["image"].avg_by_sample == pytest.approx(0.4)
    assert run.levels["image"].count == 5
    assert run.failures_by_category == {"Progressive Image Transformation": {"generation_failed": 1}}
    assert run.levels["holistic"].avg_by_sample == 10.0
    assert run.config["backend"] == "mock"


def test_reports_are_deterministic_and_ledger_is_additive(fixtures_dir: Path, tmp_path: Path):
    _, first = _full_run(fixtures_dir, tmp_path / "a")
    _, second = _full_run(fixtures_dir, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    entries = json.loads((tmp_path / "a" / "ledger.json").read_text())
    assert len(entries) == len(first.ledger.entries)
    assert sum(e["input_tokens"] + e["output_tokens"] for e in entries) == first.ledger.total().total

    report = json.loads((tmp_path / "a" / "report.json").read_text())
    per_sample_total = sum(u["input_tokens"] + u["output_tokens"] for s in report["samples"] for u in s["usage"].values())
    assert report["usage_total"]["input_tokens"] + report["usage_total"]["output_tokens"] == per_sample_total

    markdown = (tmp_path / "a" / "report.md").read_text()
    assert markdown.startswith("# Evaluation report")
    assert "| block |" in markdown
    assert "## Average tokens per sample" in markdown


def test_render_markdown_orders_categories_by_taxonomy():
    reports = [
        _report("1", "Image-Text Complementation", "HowTo", ModalityClass.BOTH, 4.0, None),
        _report("2", "Style Transfer", "Photo Variation", ModalityClass.VISION, 6.0, 1.0),
    ]
    header = render_markdown(aggregate(reports)).splitlines()[4]
    assert header.index("Style Transfer") < header.index("Image-Text Complementation")


def test_emit_report_rejects_unknown_format(tmp_path: Path):
    run = aggregate([_report("1", "Style Transfer", "Photo Variation", ModalityClass.VISION, 6.0, 1.0)])
    with pytest.raises(ValueError):
        emit_report(run, tmp_path, ("html",))


def test_run_config_echo_is_in_report(fixtures_dir: Path):
    run_config: RunConfig = load_run_config(fixtures_dir / "config.toml")
    run = aggregate([_report("1", "Style Transfer", "Photo Variation", ModalityClass.VISION, 6.0, 1.0)], run_config.echo())
    assert run.config["levels"] == ["structural", "block", "image", "holistic"]
