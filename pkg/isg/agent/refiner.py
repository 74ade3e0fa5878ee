"""
Refinement: repairs failed plans and smooths the text of finished answers.

Plan-level problems (unparseable plan, constraint violations) trigger a full
re-plan. Step-level failures regenerate only the failing step's Input_text and
re-run the plan; steps that already succeeded are served from the memo.
Smoothing rewrites text blocks but never moves, adds or drops a block.
"""

import json
import logging
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from isg.agent.executor import ExecutionMemo, bind_tools, execute_best_effort, execute_plan
from isg.agent.plan import Plan, PlanStep, Violation, ViolationKind, validate_plan
from isg.agent.planner import build_plan, query_parts
from isg.agent.tools import TOOL_BOX, ToolClient, ToolSpec
from isg.content import Block, BlockKind, ImageRef, InterleavedSequence, normalize_sequence, structure_signature
from isg.errors import CaptionFailure, MalformedPlan, NoJsonFound, RefinementExhausted, ToolFailure
from isg.gateway import Gateway, extract_json
from isg.prompts import AGENT_SMOOTHING_PROMPT, AGENT_STEP_REWRITE_PROMPT

logger = logging.getLogger(__name__)

IMAGE_MARKER = "<boi><eoi>"

StepError = Union[ToolFailure, CaptionFailure]
Outcome = Union[InterleavedSequence, MalformedPlan, ToolFailure, CaptionFailure, list[Violation]]


class RefinementBudget(BaseModel):
    model_config = ConfigDict(frozen=True)

    replans: int = Field(default=1, ge=0)
    step_regenerations: int = Field(default=2, ge=0)


class RefinedAnswer(BaseModel):
    answer: InterleavedSequence
    plan: Optional[Plan] = None
    flags: list[str] = []
    replans: int = 0
    regenerations: dict[int, int] = {}
    smoothing: str = "skipped"


# --- smoothing ---


def render_with_markers(answer: InterleavedSequence) -> str:
    """Answer as text with every image replaced by the image marker."""
    return "\n".join(IMAGE_MARKER if b.kind is BlockKind.IMAGE else b.text for b in answer.blocks)


def _text_layout(segments: list[str]) -> list[bool]:
    return [bool(segment.strip()) for segment in segments]


def apply_smoothing(answer: InterleavedSequence, smoothed: str) -> Optional[InterleavedSequence]:
    """
    Rebuild the answer from a smoothed rendering, reusing the original images.

    Returns None when the rendering moved, added or dropped a block.
    """
    original = render_with_markers(normalize_sequence(answer)).split(IMAGE_MARKER)
    rewritten = smoothed.split(IMAGE_MARKER)
    if len(rewritten) != len(original) or _text_layout(rewritten) != _text_layout(original):
        return None

    images = answer.images
    blocks: list[Block] = []
    for position, segment in enumerate(rewritten):
        if segment.strip():
            blocks.append(Block.of_text(segment.strip()))
        if position < len(images):
            blocks.append(Block.of_image(images[position]))
    result = InterleavedSequence(blocks=tuple(blocks))
    if structure_signature(result) != structure_signature(normalize_sequence(answer)):
        return None
    return result


async def smooth_answer(answer: InterleavedSequence, gateway: Gateway) -> tuple[InterleavedSequence, str]:
    """Smoothed answer with the outcome: accepted, rejected or skipped (no text to smooth)."""
    if not answer.texts:
        return answer, "skipped"
    request = gateway.request(AGENT_SMOOTHING_PROMPT, render_with_markers(answer))
    response = await gateway.complete(request, purpose="agent.smooth")
    smoothed = apply_smoothing(answer, response.text)
    if smoothed is None:
        logger.warning("Smoothing changed the answer layout, keeping the unsmoothed answer")
        return answer, "rejected"
    return smoothed, "accepted"


# --- step regeneration ---


async def rewrite_step(
    step: PlanStep, error: StepError, query: InterleavedSequence, gateway: Gateway
) -> Optional[str]:
    """New Input_text for a failed step, or None when the reply is unusable."""
    parts: list[Union[str, ImageRef]] = [
        "## Step",
        json.dumps(step.to_json(), ensure_ascii=False),
        "## Error",
        error.message,
        "## Query",
        *query_parts(query),
    ]
    response = await gateway.complete(gateway.request(AGENT_STEP_REWRITE_PROMPT, *parts), purpose="agent.rewrite")
    try:
        data = extract_json(response.text)
    except NoJsonFound:
        logger.warning(f"Step {step.step}: rewrite reply has no JSON")
        return None
    if not isinstance(data, dict):
        return None
    lowered = {str(k).lower(): v for k, v in data.items()}
    text = lowered.get("input_text")
    return text.strip() if isinstance(text, str) and text.strip() else None


class Refiner:
    def __init__(
        self,
        gateway: Gateway,
        client: ToolClient,
        tools: Optional[list[ToolSpec]] = None,
        budget: Optional[RefinementBudget] = None,
        smooth: bool = True,
    ):
        self.gateway = gateway
        self.client = client
        self.tools = list(tools or TOOL_BOX)
        self.budget = budget or RefinementBudget()
        self.smooth = smooth
        self.memo = ExecutionMemo()

    async def attempt(self, plan: Plan, query: InterleavedSequence) -> Outcome:
        """Validate and run a plan; failures come back as the outcome, never raised."""
        try:
            plan = await bind_tools(plan, self.tools, self.gateway)
        except ToolFailure as e:
            logger.warning(f"Tool selection failed: {e}")
            return e
        violations = validate_plan(plan, self.tools, query_image_count=len(query.images))
        if violations:
            for v in violations:
                logger.warning(f"Plan violation {v.kind.value} at step {v.step}: {v.message}")
            return violations
        try:
            return await execute_plan(plan, query, self.client, self.gateway, self.tools, self.memo)
        except (ToolFailure, CaptionFailure) as e:
            logger.warning(f"Execution failed: {e}")
            return e

    async def plan_and_attempt(
        self, query: InterleavedSequence, rejected: Optional[list[str]] = None
    ) -> tuple[Optional[Plan], Outcome]:
        try:
            plan = await build_plan(query, self.gateway, rejected=rejected)
        except MalformedPlan as e:
            logger.warning(f"Planner reply rejected: {e}")
            return None, e
        return plan, await self.attempt(plan, query)

    async def _exhausted(
        self, plan: Optional[Plan], query: InterleavedSequence, reason: str, replans: int, regenerations: dict[int, int]
    ) -> RefinementExhausted:
        flags = ["refinement_exhausted"]
        answer = InterleavedSequence()
        if plan is not None:
            # execute_best_effort binds ambiguous steps itself
            blocking = [
                v for v in validate_plan(plan, self.tools, len(query.images))
                if v.kind is not ViolationKind.AMBIGUOUS_TOOL
            ]
            if not blocking:
                report = await execute_best_effort(plan, query, self.client, self.gateway, self.tools, self.memo)
                answer = report.answer
                flags.extend(f"skipped: {s}" for s in report.skipped)
        best_effort = RefinedAnswer(
            answer=answer, plan=plan, flags=flags, replans=replans, regenerations=dict(regenerations)
        )
        return RefinementExhausted(reason, best_effort=best_effort, flags=flags)

    async def refine(self, plan: Optional[Plan], outcome: Outcome, query: InterleavedSequence) -> RefinedAnswer:
        """
        Drive an outcome to a finished answer within the refinement budget.

        Raises:
            RefinementExhausted: the budget ran out; carries a best-effort RefinedAnswer
        """
        replans = 0
        regenerations: dict[int, int] = {}

        while not isinstance(outcome, InterleavedSequence):
            if isinstance(outcome, (ToolFailure, CaptionFailure)) and plan is not None:
                used = regenerations.get(outcome.step, 0)
                if used >= self.budget.step_regenerations:
                    raise await self._exhausted(plan, query, f"step {outcome.step} kept failing: {outcome.message}", replans, regenerations)
                regenerations[outcome.step] = used + 1
                failed = next((s for s in plan.steps if s.step == outcome.step), None)
                if failed is None:
                    raise await self._exhausted(plan, query, f"failed step {outcome.step} is not in the plan", replans, regenerations)
                text = await rewrite_step(failed, outcome, query, self.gateway)
                if text is not None:
                    logger.info(f"Step {failed.step}: regenerated Input_text (attempt {used + 1})")
                    plan = plan.replace_step(failed.model_copy(update={"input_text": text}))
                outcome = await self.attempt(plan, query)
                continue

            if replans >= self.budget.replans:
                raise await self._exhausted(plan, query, "plan could not be repaired", replans, regenerations)
            replans += 1
            if isinstance(outcome, list):
                reasons = [f"{v.kind.value}: {v.message}" for v in outcome]
            else:
                reasons = [str(outcome)]
            logger.info(f"Re-planning from scratch ({len(reasons)} problem(s))")
            plan, outcome = await self.plan_and_attempt(query, rejected=reasons)
            # step failures after a re-plan are charged against the new plan
            regenerations = {}

        answer = outcome
        smoothing = "skipped"
        if self.smooth:
            answer, smoothing = await smooth_answer(answer, self.gateway)
        return RefinedAnswer(
            answer=answer, plan=plan, replans=replans, regenerations=regenerations, smoothing=smoothing
        )
