"""
Executor: runs a validated plan against the tool box.

Phase one calls every tool step in order and collects the generated image
list. Phase two walks the Caption and AddImage steps and assembles the answer.
"""

import logging
from typing import Optional, Union

from isg.agent.plan import PlaceholderKind, Plan, PlanStep, StepTask, resolve_step_tool, step_tool
from isg.agent.tools import TOOL_BOX, ToolClient, ToolSpec
from isg.content import Block, ImageRef, InterleavedSequence, normalize_sequence
from isg.errors import CaptionFailure, NoJsonFound, ToolFailure
from isg.gateway import Gateway, extract_json
from isg.prompts import AGENT_CAPTION_PROMPT, AGENT_TOOL_SELECTOR_PROMPT

logger = logging.getLogger(__name__)

# generated slots of a failed step stay None so later indices do not shift
Slots = list[Optional[ImageRef]]


class ExecutionMemo:
    """
    Outputs of steps that already succeeded, keyed by step number, text and
    input image digests. Re-running a plan only repeats steps whose inputs changed.
    """

    def __init__(self):
        self.tool_outputs: dict[tuple, list[ImageRef]] = {}
        self.captions: dict[tuple, str] = {}

    @staticmethod
    def key(step: PlanStep, images: list[ImageRef]) -> tuple:
        return (step.step, step.task.value, step.input_text or "", tuple(i.digest() for i in images))


class ExecutionReport:
    """What a best-effort run produced and which steps it had to skip."""

    def __init__(self, answer: InterleavedSequence, generated: list[ImageRef], skipped: list[str]):
        self.answer = answer
        self.generated = generated
        self.skipped = skipped


def resolve_images(step: PlanStep, query: InterleavedSequence, generated: Slots, error: type) -> list[ImageRef]:
    """Placeholders of a step as images; `error` is raised for anything unavailable."""
    originals = query.images
    resolved = []
    for placeholder in step.input_images:
        if placeholder.kind is PlaceholderKind.ORIGINAL:
            pool, position = originals, placeholder.index - 1
        else:
            pool, position = generated, placeholder.index
        image = pool[position] if position < len(pool) else None
        if image is None:
            raise error(step.step, f"{placeholder} is not available")
        resolved.append(image)
    return resolved


async def select_tool(step: PlanStep, candidates: list[ToolSpec], gateway: Gateway) -> ToolSpec:
    """Ask the model to break a tie between tools whose phrases all match."""
    listing = "\n".join(f"- {tool.name}: {tool.description}" for tool in candidates)
    request = gateway.request(
        AGENT_TOOL_SELECTOR_PROMPT.format(tools=listing),
        f"Instruction: {step.input_text}",
        f"Number of input images: {len(step.input_images)}",
    )
    response = await gateway.complete(request, purpose="agent.select")
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise ToolFailure(step.step, f"tool selection reply has no JSON: {e}") from e
    name = data.get("tool") if isinstance(data, dict) else None
    by_name = {tool.name: tool for tool in candidates}
    if name not in by_name:
        raise ToolFailure(step.step, f"selector picked {name!r}, expected one of {sorted(by_name)}")
    return by_name[name]


async def bind_tools(plan: Plan, tools: list[ToolSpec], gateway: Gateway) -> Plan:
    """
    Record the selector's choice on every Call_tool step that several tools match.

    Raises:
        ToolFailure: the selector reply names no candidate
    """
    for step in plan.tool_steps():
        if step.tool is not None:
            continue
        candidates = resolve_step_tool(step, tools)
        if len(candidates) > 1:
            chosen = await select_tool(step, candidates, gateway)
            logger.info(f"Step {step.step}: selector chose {chosen.name}")
            plan = plan.replace_step(step.model_copy(update={"tool": chosen.name}))
    return plan


async def run_tool_step(
    step: PlanStep,
    images: list[ImageRef],
    client: ToolClient,
    tools: list[ToolSpec],
    memo: ExecutionMemo,
) -> list[ImageRef]:
    key = ExecutionMemo.key(step, images)
    if key in memo.tool_outputs:
        return memo.tool_outputs[key]

    tool = step_tool(step, tools)
    if tool is None:
        raise ToolFailure(step.step, "no single tool matches the instruction")
    count = tool.output_count(step.input_text or "")
    logger.info(f"Step {step.step}: {tool.name} with {len(images)} image(s), expecting {count}")
    result = await client.run(tool, step.input_text or "", images, count, step.step)
    if not result.success:
        raise ToolFailure(step.step, result.error or f"{tool.name} failed")
    if not result.images:
        raise ToolFailure(step.step, f"{tool.name} returned no images")
    memo.tool_outputs[key] = list(result.images)
    return memo.tool_outputs[key]


async def run_caption_step(
    step: PlanStep, images: list[ImageRef], gateway: Gateway, memo: ExecutionMemo
) -> str:
    key = ExecutionMemo.key(step, images)
    if key in memo.captions:
        return memo.captions[key]

    parts: list[Union[str, ImageRef]] = [f"Instruction: {step.input_text}"]
    for placeholder, image in zip(step.input_images, images):
        parts.extend([f"{placeholder}:", image])
    response = await gateway.complete(gateway.request(AGENT_CAPTION_PROMPT, *parts), purpose="agent.caption")
    text = response.text.strip()
    if not text:
        raise CaptionFailure(step.step, "caption came back empty")
    memo.captions[key] = text
    return text


def _expected_outputs(step: PlanStep, tools: list[ToolSpec]) -> int:
    tool = step_tool(step, tools)
    return tool.output_count(step.input_text or "") if tool is not None else 0


async def execute_plan(
    plan: Plan,
    query: InterleavedSequence,
    client: ToolClient,
    gateway: Gateway,
    tools: Optional[list[ToolSpec]] = None,
    memo: Optional[ExecutionMemo] = None,
) -> InterleavedSequence:
    """
    Run a plan and return the normalized answer.

    Raises:
        ToolFailure: a tool call failed or a placeholder could not be resolved
        CaptionFailure: a caption call returned nothing usable
    """
    tools = list(tools or TOOL_BOX)
    memo = memo if memo is not None else ExecutionMemo()
    plan = await bind_tools(plan, tools, gateway)

    generated: Slots = []
    for step in plan.tool_steps():
        images = resolve_images(step, query, generated, ToolFailure)
        generated.extend(await run_tool_step(step, images, client, tools, memo))

    blocks: list[Block] = []
    for step in plan.assembly_steps():
        images = resolve_images(step, query, generated, CaptionFailure)
        if step.task is StepTask.ADD_IMAGE:
            if len(images) != 1:
                raise CaptionFailure(step.step, "AddImage takes exactly one image")
            blocks.append(Block.of_image(images[0]))
        else:
            blocks.append(Block.of_text(await run_caption_step(step, images, gateway, memo)))
    return normalize_sequence(InterleavedSequence(blocks=tuple(blocks)))


async def execute_best_effort(
    plan: Plan,
    query: InterleavedSequence,
    client: ToolClient,
    gateway: Gateway,
    tools: Optional[list[ToolSpec]] = None,
    memo: Optional[ExecutionMemo] = None,
) -> ExecutionReport:
    """Run what can be run. Failed steps are skipped and blocks needing their images are dropped."""
    tools = list(tools or TOOL_BOX)
    memo = memo if memo is not None else ExecutionMemo()
    skipped: list[str] = []
    try:
        plan = await bind_tools(plan, tools, gateway)
    except ToolFailure as e:
        skipped.append(str(e))

    slots: Slots = []
    for step in plan.tool_steps():
        try:
            images = resolve_images(step, query, slots, ToolFailure)
            slots.extend(await run_tool_step(step, images, client, tools, memo))
        except ToolFailure as e:
            skipped.append(str(e))
            slots.extend([None] * _expected_outputs(step, tools))

    blocks: list[Block] = []
    for step in plan.assembly_steps():
        try:
            images = resolve_images(step, query, slots, CaptionFailure)
            if step.task is StepTask.ADD_IMAGE:
                if len(images) != 1:
                    raise CaptionFailure(step.step, "AddImage takes exactly one image")
                blocks.append(Block.of_image(images[0]))
            else:
                blocks.append(Block.of_text(await run_caption_step(step, images, gateway, memo)))
        except CaptionFailure as e:
            skipped.append(str(e))
    answer = normalize_sequence(InterleavedSequence(blocks=tuple(blocks)))
    generated = [image for image in slots if image is not None]
    return ExecutionReport(answer=answer, generated=generated, skipped=skipped)
