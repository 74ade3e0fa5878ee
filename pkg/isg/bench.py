"""
Benchmark runner

Loads a corpus of samples, evaluates each answer at the structural, block,
image and holistic levels, aggregates per subcategory / category / modality
class and writes the run report.
"""

import asyncio
import json
import logging
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ValidationError

from isg.config import EvalConfig, Level, RunConfig, VqaMode
from isg.content import BlockKind, InterleavedSequence, normalize_sequence, structure_signature
from isg.errors import (
    BackendUnreachable,
    DuplicateSampleId,
    EmptyInput,
    FixtureMiss,
    MalformedPrediction,
    MissingAnswer,
    ReportWriteError,
    SchemaViolation,
)
from isg.evaluators.block import BlockLevelResult, evaluate_block_level
from isg.evaluators.block.evaluator import SCALE_MIN
from isg.evaluators.common import Failure
from isg.evaluators.holistic import DIMENSIONS, HolisticJudgment, judge_holistic
from isg.evaluators.image import ImageLevelResult, ImageRequirement, evaluate_image_level
from isg.evaluators.structure import (
    StructuralVerdict,
    StructurePrediction,
    match_structures,
    predict_structure,
)
from isg.gateway import Ledger, ModelGateway, ScopedGateway, TokenUsage

logger = logging.getLogger(__name__)

MISSING = "MISSING"
EVALUATION_ERROR = "ERROR"
LEVEL_PURPOSES = {
    Level.STRUCTURAL: "structure",
    Level.BLOCK: "block.",
    Level.IMAGE: "image.",
    Level.HOLISTIC: "holistic",
}


class ModalityClass(str, Enum):
    VISION = "vision"
    BOTH = "both"
    LANGUAGE = "language"


# --- taxonomy ---


class TaskCategory(BaseModel):
    name: str
    modality_class: ModalityClass
    image_requirement: ImageRequirement
    subcategories: list[str]


class Taxonomy(BaseModel):
    categories: list[TaskCategory]

    def category(self, name: str) -> Optional[TaskCategory]:
        return next((c for c in self.categories if c.name == name), None)

    def order(self) -> list[str]:
        return [c.name for c in self.categories]

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "Taxonomy":
        """Load a taxonomy file; without a path, the packaged default."""
        if path is None:
            text = resources.files("isg").joinpath("data/taxonomy.json").read_text(encoding="utf-8")
            source = "isg/data/taxonomy.json"
        else:
            text = path.read_text(encoding="utf-8")
            source = str(path)
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            loc = ".".join(str(p) for p in e.errors()[0]["loc"])
            raise SchemaViolation(source, loc, e.errors()[0]["msg"]) from e


# --- corpus ---


class Sample(BaseModel):
    id: str
    category: str
    subcategory: str
    modality_class: ModalityClass
    image_requirement: ImageRequirement
    query: InterleavedSequence
    golden: InterleavedSequence


_SAMPLE_FIELDS = ("id", "category", "subcategory", "modality_class", "image_requirement", "query", "golden")


def parse_sample(path: Path, taxonomy: Taxonomy) -> Sample:
    """
    Parse one sample file.

    Raises:
        SchemaViolation: missing or invalid field, or inconsistent with the taxonomy
    """
    file = str(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaViolation(file, "<json>", str(e)) from e
    if not isinstance(raw, dict):
        raise SchemaViolation(file, "<root>", "expected an object")
    for name in _SAMPLE_FIELDS:
        if name not in raw:
            raise SchemaViolation(file, name, "missing")

    sequences = {}
    for name in ("query", "golden"):
        try:
            sequences[name] = InterleavedSequence.from_document(raw[name], base_dir=path.parent)
        except ValueError as e:
            raise SchemaViolation(file, name, str(e)) from e
    try:
        sample = Sample(
            **{k: raw[k] for k in ("id", "category", "subcategory", "modality_class", "image_requirement")},
            **sequences,
        )
    except ValidationError as e:
        field = str(e.errors()[0]["loc"][0])
        raise SchemaViolation(file, field, e.errors()[0]["msg"]) from e

    category = taxonomy.category(sample.category)
    if category is None:
        raise SchemaViolation(file, "category", f"unknown category '{sample.category}'")
    if sample.subcategory not in category.subcategories:
        raise SchemaViolation(
            file, "subcategory", f"'{sample.subcategory}' is not a subtask of '{sample.category}'"
        )
    if sample.modality_class is not category.modality_class:
        raise SchemaViolation(file, "modality_class", f"expected '{category.modality_class.value}'")
    if sample.image_requirement is not category.image_requirement:
        raise SchemaViolation(
            file, "image_requirement", f"expected '{category.image_requirement.value}'"
        )
    if not sample.query.of_kind(BlockKind.TEXT):
        raise SchemaViolation(file, "query", "needs at least one text block")
    return sample


def load_corpus(corpus_dir: Path, taxonomy: Optional[Taxonomy] = None) -> list[Sample]:
    """
    Load `samples/*.json` from a corpus directory, sorted by sample id.

    A `taxonomy.json` next to `samples/` overrides the packaged taxonomy.

    Raises:
        SchemaViolation: first invalid sample file
        DuplicateSampleId: two files declare the same id
    """
    if taxonomy is None:
        local = corpus_dir / "taxonomy.json"
        taxonomy = Taxonomy.load(local if local.exists() else None)
    sample_dir = corpus_dir / "samples"
    if not sample_dir.is_dir():
        raise SchemaViolation(str(corpus_dir), "samples", "directory not found")

    samples: dict[str, Sample] = {}
    origin: dict[str, str] = {}
    for path in sorted(sample_dir.glob("*.json")):
        sample = parse_sample(path, taxonomy)
        if sample.id in samples:
            raise DuplicateSampleId(sample.id, (origin[sample.id], str(path)))
        samples[sample.id] = sample
        origin[sample.id] = str(path)
    logger.info(f"Loaded {len(samples)} samples from {corpus_dir}")
    return [samples[key] for key in sorted(samples)]


def load_answer(answers_dir: Path, sample_id: str) -> InterleavedSequence:
    """
    Load an answer document and check that every image it cites can be read.

    Raises:
        MissingAnswer: no readable answer document, or an image that cannot be opened
    """
    path = answers_dir / f"{sample_id}.json"
    if not path.exists():
        raise MissingAnswer(f"no answer file for '{sample_id}'")
    try:
        answer = InterleavedSequence.load(path)
    except (OSError, ValueError) as e:
        raise MissingAnswer(f"unreadable answer for '{sample_id}': {e}") from e
    for position, image in enumerate(answer.images, start=1):
        try:
            image.load()
        except (OSError, ValueError) as e:
            raise MissingAnswer(f"answer for '{sample_id}' has an unreadable image {position}: {e}") from e
    return answer


# --- per-sample reports ---


class StructuralReport(BaseModel):
    matched: bool
    predicted: Optional[str] = None
    actual: str
    artifact: Optional[str] = None


class BlockReport(BaseModel):
    score: float
    mode: VqaMode
    artifact: Optional[str] = None


class ImageReport(BaseModel):
    score: Optional[float]
    absent: bool
    artifact: Optional[str] = None


class HolisticReport(BaseModel):
    overall: int
    dimensions: dict[str, int]
    flagged: bool = False
    artifact: Optional[str] = None


class SampleReport(BaseModel):
    sample_id: str
    category: str
    subcategory: str
    modality_class: ModalityClass
    structural: Optional[StructuralReport] = None
    block: Optional[BlockReport] = None
    image: Optional[ImageReport] = None
    holistic: Optional[HolisticReport] = None
    failures: list[Failure] = []
    flags: list[str] = []
    usage: dict[str, TokenUsage] = {}

    def level_value(self, level: Level) -> Optional[float]:
        """The number this sample contributes to a level's aggregates, or None."""
        if level is Level.STRUCTURAL:
            return None if self.structural is None else float(self.structural.matched)
        if level is Level.BLOCK:
            return None if self.block is None else self.block.score
        if level is Level.IMAGE:
            return None if self.image is None or self.image.absent else self.image.score
        return None if self.holistic is None else float(self.holistic.overall)


class SampleArtifacts:
    """Writes per-level JSON artifacts under <out>/samples/<id>/."""

    def __init__(self, out_dir: Optional[Path], sample_id: str):
        self.out_dir = out_dir
        self.relative = Path("samples") / sample_id

    def write(self, name: str, payload: Any) -> Optional[str]:
        if self.out_dir is None:
            return None
        target = self.out_dir / self.relative / f"{name}.json"
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        except OSError as e:
            raise ReportWriteError(f"cannot write {target}: {e}") from e
        return (self.relative / f"{name}.json").as_posix()


def _image_fallback(sample: Sample, cfg: EvalConfig, skipped: str) -> Optional[ImageLevelResult]:
    if not cfg.enabled(Level.IMAGE):
        return None
    if sample.image_requirement is ImageRequirement.EMPTY:
        return ImageLevelResult(requirement=sample.image_requirement, score=None, skipped="no image requirement")
    return ImageLevelResult(requirement=sample.image_requirement, score=0.0, skipped=skipped)


def _image_report(result: Optional[ImageLevelResult], artifact: Optional[str]) -> ImageReport:
    if result is None:
        return ImageReport(score=None, absent=True)
    return ImageReport(score=result.score, absent=result.absent, artifact=artifact)


def _missing_report(sample: Sample, cfg: EvalConfig, error: MissingAnswer) -> SampleReport:
    logger.warning(f"{sample.id}: {error}")
    return _fallback_report(sample, cfg, Failure.of("answer", error), MISSING)


def _fallback_report(sample: Sample, cfg: EvalConfig, failure: Failure, flag: str) -> SampleReport:
    """Every enabled level at its fallback score, for a sample that could not be evaluated."""
    report = SampleReport(
        sample_id=sample.id,
        category=sample.category,
        subcategory=sample.subcategory,
        modality_class=sample.modality_class,
        failures=[failure],
        flags=[flag],
    )
    if cfg.enabled(Level.STRUCTURAL):
        report.structural = StructuralReport(matched=False, actual="")
    if cfg.enabled(Level.BLOCK):
        report.block = BlockReport(score=SCALE_MIN[cfg.vqa_mode], mode=cfg.vqa_mode)
    if cfg.enabled(Level.IMAGE):
        report.image = _image_report(_image_fallback(sample, cfg, flag), None)
    if cfg.enabled(Level.HOLISTIC):
        fallback = HolisticJudgment.fallback(failure.message)
        report.holistic = HolisticReport(
            overall=fallback.overall, dimensions=fallback.dimensions(), flagged=True
        )
    return report


async def evaluate_sample(
    sample: Sample,
    answer: Optional[InterleavedSequence],
    gateway: ModelGateway,
    cfg: EvalConfig,
    out_dir: Optional[Path] = None,
) -> SampleReport:
    """
    Evaluate one answer at every enabled level.

    A structural mismatch (or an unusable structure prediction) puts the block
    level at its scale minimum and the image level at 0.0 / ABSENT without any
    block or image model calls. The holistic level always runs.
    """
    if answer is None:
        return _missing_report(sample, cfg, MissingAnswer(f"no answer for '{sample.id}'"))

    answer = normalize_sequence(answer)
    scoped: ScopedGateway = gateway.scoped(sample.id)
    artifacts = SampleArtifacts(out_dir, sample.id)
    report = SampleReport(
        sample_id=sample.id,
        category=sample.category,
        subcategory=sample.subcategory,
        modality_class=sample.modality_class,
    )

    prediction: Optional[StructurePrediction] = None
    verdict: Optional[StructuralVerdict] = None
    if cfg.enabled(Level.STRUCTURAL):
        actual = structure_signature(answer)
        try:
            prediction = await predict_structure(sample.query, scoped, few_shot=cfg.few_shot)
            verdict = match_structures(prediction, answer)
        except MalformedPrediction as e:
            logger.warning(f"{sample.id}: {e}")
            report.failures.append(Failure.of("structural", e))
        artifact = artifacts.write(
            "structure",
            {
                "prediction": prediction.model_dump(mode="json") if prediction else None,
                "matched": verdict.matched if verdict else False,
                "actual": str(actual),
            },
        )
        report.structural = StructuralReport(
            matched=verdict.matched if verdict else False,
            predicted=str(verdict.predicted) if verdict else None,
            actual=str(actual),
            artifact=artifact,
        )

    matched = verdict is not None and verdict.matched
    if not matched:
        skipped = "structure mismatch" if verdict is not None else "no structure prediction"
        if cfg.enabled(Level.BLOCK):
            block = BlockLevelResult.at_minimum(cfg.vqa_mode, skipped)
            report.block = BlockReport(
                score=block.score, mode=block.mode, artifact=artifacts.write("block", block.model_dump(mode="json"))
            )
        image = _image_fallback(sample, cfg, skipped)
        if image is not None:
            report.image = _image_report(image, artifacts.write("image", image.model_dump(mode="json")))
    else:
        if cfg.enabled(Level.BLOCK):
            block = await evaluate_block_level(
                sample.query,
                answer,
                prediction,
                scoped,
                mode=cfg.vqa_mode,
                few_shot=cfg.few_shot,
                with_images=cfg.block_vision_input,
            )
            report.failures.extend(block.failures)
            report.block = BlockReport(
                score=block.score, mode=block.mode, artifact=artifacts.write("block", block.model_dump(mode="json"))
            )
        if cfg.enabled(Level.IMAGE):
            image = await evaluate_image_level(
                sample.query,
                answer,
                prediction,
                scoped,
                requirement=sample.image_requirement,
                few_shot=cfg.few_shot,
                with_images=cfg.image_vision_input,
            )
            report.failures.extend(image.failures)
            report.image = _image_report(image, artifacts.write("image", image.model_dump(mode="json")))

    if cfg.enabled(Level.HOLISTIC):
        judgment = await judge_holistic(
            sample.query, answer, sample.golden, scoped, use_golden=cfg.use_golden
        )
        if judgment.flagged:
            report.failures.append(
                Failure(level="holistic", code="unparseable_judgment", message=judgment.reason or "")
            )
        report.holistic = HolisticReport(
            overall=judgment.overall,
            dimensions=judgment.dimensions(),
            flagged=judgment.flagged,
            artifact=artifacts.write("holistic", judgment.model_dump(mode="json")),
        )

    report.usage = {
        level.value: scoped.usage(LEVEL_PURPOSES[level]) for level in cfg.levels
    }
    return report


# --- aggregation ---


class LevelAggregate(BaseModel):
    by_subcategory: dict[str, float]
    by_category: dict[str, float]
    by_modality: dict[str, float]
    avg_by_category: Optional[float]
    avg_by_sample: Optional[float]
    count: int


class UsageRow(BaseModel):
    input_tokens: float
    output_tokens: float
    total: float


class RunReport(BaseModel):
    config: dict[str, Any] = {}
    samples: list[SampleReport]
    levels: dict[str, LevelAggregate]
    failures_by_category: dict[str, dict[str, int]]
    usage_per_sample: dict[str, UsageRow]
    usage_total: TokenUsage


def _mean(values: list[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def _grouped_means(reports: list[SampleReport], level: Level, key) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for report in reports:
        value = report.level_value(level)
        if value is not None:
            groups.setdefault(key(report), []).append(value)
    return {name: _mean(values) for name, values in sorted(groups.items())}


def aggregate(reports: list[SampleReport], config: Optional[dict[str, Any]] = None) -> RunReport:
    """
    Roll per-sample reports up into per-subcategory, per-category and per-modality means.

    ABSENT image scores are left out of every denominator. The global average is
    reported both over category means and over samples.

    Raises:
        EmptyInput: no reports
    """
    if not reports:
        raise EmptyInput("aggregate needs at least one sample report")
    reports = sorted(reports, key=lambda r: r.sample_id)

    levels: dict[str, LevelAggregate] = {}
    for level in Level:
        values = [v for v in (r.level_value(level) for r in reports) if v is not None]
        if not values:
            continue
        by_category = _grouped_means(reports, level, lambda r: r.category)
        levels[level.value] = LevelAggregate(
            by_subcategory=_grouped_means(reports, level, lambda r: r.subcategory),
            by_category=by_category,
            by_modality=_grouped_means(reports, level, lambda r: r.modality_class.value),
            avg_by_category=_mean(list(by_category.values())),
            avg_by_sample=_mean(values),
            count=len(values),
        )

    failures: dict[str, dict[str, int]] = {}
    for report in reports:
        for failure in report.failures:
            counts = failures.setdefault(report.category, {})
            counts[failure.code] = counts.get(failure.code, 0) + 1

    usage_rows: dict[str, UsageRow] = {}
    total = TokenUsage()
    for level in Level:
        used = [r.usage[level.value] for r in reports if level.value in r.usage]
        if not used:
            continue
        usage_rows[level.value] = UsageRow(
            input_tokens=sum(u.input_tokens for u in used) / len(reports),
            output_tokens=sum(u.output_tokens for u in used) / len(reports),
            total=sum(u.total for u in used) / len(reports),
        )
        for usage in used:
            total = total + usage

    return RunReport(
        config=config or {},
        samples=reports,
        levels=levels,
        failures_by_category=failures,
        usage_per_sample=usage_rows,
        usage_total=total,
    )


async def evaluate_corpus(
    samples: list[Sample],
    answers_dir: Path,
    gateway: ModelGateway,
    run_config: RunConfig,
    out_dir: Optional[Path] = None,
) -> RunReport:
    """Evaluate every sample with a bounded number of concurrent workers, then aggregate."""
    cfg = run_config.eval
    semaphore = asyncio.Semaphore(cfg.workers)

    async def run_one(sample: Sample) -> SampleReport:
        async with semaphore:
            try:
                answer = load_answer(answers_dir, sample.id)
            except MissingAnswer as e:
                return _missing_report(sample, cfg, e)
            logger.info(f"Evaluating {sample.id} ({sample.subcategory})")
            try:
                return await evaluate_sample(sample, answer, gateway, cfg, out_dir)
            except (BackendUnreachable, FixtureMiss, ReportWriteError):
                raise
            except Exception as e:
                logger.exception(f"{sample.id}: evaluation failed")
                failure = Failure(level="sample", code="evaluation_error", message=f"{type(e).__name__}: {e}")
                return _fallback_report(sample, cfg, failure, EVALUATION_ERROR)

    reports = await asyncio.gather(*(run_one(sample) for sample in samples))
    return aggregate(list(reports), run_config.echo())


# --- report emission ---


REPORT_FORMATS = ("markdown", "ledger")


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"


def render_markdown(run: RunReport, taxonomy: Optional[Taxonomy] = None) -> str:
    taxonomy = taxonomy or Taxonomy.load()
    seen = {r.category for r in run.samples}
    categories = [name for name in taxonomy.order() if name in seen]
    categories += sorted(seen - set(categories))

    lines = ["# Evaluation report", ""]
    lines.append("## Scores by category")
    lines.append("")
    lines.append("| Level | " + " | ".join(categories) + " | Avg. (categories) | Avg. (samples) |")
    lines.append("|---" * (len(categories) + 3) + "|")
    for level in Level:
        aggregate_row = run.levels.get(level.value)
        if aggregate_row is None:
            continue
        cells = [_fmt(aggregate_row.by_category.get(name)) for name in categories]
        cells += [_fmt(aggregate_row.avg_by_category), _fmt(aggregate_row.avg_by_sample)]
        lines.append(f"| {level.value} | " + " | ".join(cells) + " |")

    lines += ["", "## Scores by modality", ""]
    modalities = [m.value for m in ModalityClass]
    lines.append("| Level | " + " | ".join(modalities) + " |")
    lines.append("|---" * (len(modalities) + 1) + "|")
    for level in Level:
        aggregate_row = run.levels.get(level.value)
        if aggregate_row is None:
            continue
        cells = [_fmt(aggregate_row.by_modality.get(m)) for m in modalities]
        lines.append(f"| {level.value} | " + " | ".join(cells) + " |")

    if run.usage_per_sample:
        lines += ["", "## Average tokens per sample", ""]
        lines.append("| Level | Input | Output | Total |")
        lines.append("|---|---|---|---|")
        for level, row in run.usage_per_sample.items():
            lines.append(
                f"| {level} | {row.input_tokens:.1f} | {row.output_tokens:.1f} | {row.total:.1f} |"
            )

    if run.failures_by_category:
        lines += ["", "## Failures", ""]
        lines.append("| Category | Code | Count |")
        lines.append("|---|---|---|")
        for category, counts in sorted(run.failures_by_category.items()):
            for code, count in sorted(counts.items()):
                lines.append(f"| {category} | {code} | {count} |")
    lines.append("")
    return "\n".join(lines)


def emit_report(
    run: RunReport,
    out_dir: Path,
    formats: tuple[str, ...] = (),
    ledger: Optional[Ledger] = None,
    taxonomy: Optional[Taxonomy] = None,
) -> list[Path]:
    """
    Write report.json plus any requested extra formats ("markdown", "ledger").

    Raises:
        ReportWriteError: output directory or a file cannot be written
    """
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(run.model_dump(mode="json"), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        written.append(report_path)
        if "markdown" in formats:
            md_path = out_dir / "report.md"
            md_path.write_text(render_markdown(run, taxonomy), encoding="utf-8")
            written.append(md_path)
        if "ledger" in formats:
            ledger_path = out_dir / "ledger.json"
            (ledger or Ledger()).dump(ledger_path)
            written.append(ledger_path)
    except OSError as e:
        raise ReportWriteError(f"cannot write report to {out_dir}: {e}") from e
    logger.info(f"Wrote {', '.join(p.name for p in written)} to {out_dir}")
    return written
