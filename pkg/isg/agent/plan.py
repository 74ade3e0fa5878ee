"""
Tool plans: parsing and validation.

A plan is a list of steps. Call_tool steps run first and fill the generated
image list <GEN_0>, <GEN_1>, ...; Caption and AddImage steps then build the
answer in order, one text or image block each.
"""

import logging
import re
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from isg.agent.tools import TOOL_BOX, ToolSpec, detect_tools, narrow_by_arity
from isg.errors import MalformedPlan

logger = logging.getLogger(__name__)

WAIT = "<WAIT>"

_ORIGINAL = re.compile(r"^#image(\d+)#$")
_GENERATED = re.compile(r"^<GEN_(\d+)>$")


class PlaceholderKind(str, Enum):
    ORIGINAL = "original"
    GENERATED = "generated"


class Placeholder(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: PlaceholderKind
    index: int

    @model_validator(mode="after")
    def _check_index(self) -> "Placeholder":
        lowest = 1 if self.kind is PlaceholderKind.ORIGINAL else 0
        if self.index < lowest:
            raise ValueError(f"{self.kind.value} placeholder index must be >= {lowest}")
        return self

    @classmethod
    def parse(cls, raw: Any) -> "Placeholder":
        text = raw.strip() if isinstance(raw, str) else ""
        if match := _ORIGINAL.match(text):
            return cls(kind=PlaceholderKind.ORIGINAL, index=int(match.group(1)))
        if match := _GENERATED.match(text):
            return cls(kind=PlaceholderKind.GENERATED, index=int(match.group(1)))
        raise ValueError(f"not an image placeholder: {raw!r}")

    @classmethod
    def original(cls, index: int) -> "Placeholder":
        return cls(kind=PlaceholderKind.ORIGINAL, index=index)

    @classmethod
    def generated(cls, index: int) -> "Placeholder":
        return cls(kind=PlaceholderKind.GENERATED, index=index)

    def render(self) -> str:
        if self.kind is PlaceholderKind.ORIGINAL:
            return f"#image{self.index}#"
        return f"<GEN_{self.index}>"

    def __str__(self) -> str:
        return self.render()


class StepTask(str, Enum):
    CALL_TOOL = "Call_tool"
    CAPTION = "Caption"
    ADD_IMAGE = "AddImage"


class PlanStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int = Field(ge=1)
    task: StepTask
    input_text: Optional[str] = None
    input_images: tuple[Placeholder, ...] = ()
    output: str = WAIT
    # set by bind_tools when several tools match a Call_tool instruction
    tool: Optional[str] = None

    def to_json(self) -> dict[str, Any]:
        body: dict[str, Any] = {"Step": self.step, "Task": self.task.value}
        if self.task is not StepTask.ADD_IMAGE:
            body["Input_text"] = self.input_text or ""
        body["Input_images"] = [p.render() for p in self.input_images]
        if self.task is not StepTask.ADD_IMAGE:
            body["Output"] = self.output
        return body


class Plan(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = "0000"
    steps: tuple[PlanStep, ...]

    def to_json(self) -> list[dict[str, Any]]:
        return [{"ID": self.id, "Plan": [step.to_json() for step in self.steps]}]

    def tool_steps(self) -> list[PlanStep]:
        return [s for s in self.steps if s.task is StepTask.CALL_TOOL]

    def assembly_steps(self) -> list[PlanStep]:
        return [s for s in self.steps if s.task is not StepTask.CALL_TOOL]

    def replace_step(self, step: PlanStep) -> "Plan":
        return self.model_copy(
            update={"steps": tuple(step if s.step == step.step else s for s in self.steps)}
        )


def _parse_step(entry: Any, position: int) -> PlanStep:
    if not isinstance(entry, dict):
        raise MalformedPlan(f"plan step {position} is not an object")
    lowered = {str(k).strip().lower(): v for k, v in entry.items()}
    try:
        task = StepTask(str(lowered.get("task", "")).strip())
    except ValueError:
        raise MalformedPlan(f"plan step {position} has unknown task {lowered.get('task')!r}")
    raw_images = lowered.get("input_images", [])
    if not isinstance(raw_images, list):
        raise MalformedPlan(f"plan step {position}: Input_images must be a list")
    try:
        images = tuple(Placeholder.parse(raw) for raw in raw_images)
        step_number = lowered.get("step", position)
        if isinstance(step_number, bool):
            raise ValueError("Step must be a number")
        text = lowered.get("input_text")
        if task is StepTask.ADD_IMAGE:
            extra = set(lowered) - {"step", "task", "input_images"}
            if extra:
                logger.warning(f"Ignoring extra AddImage fields {sorted(extra)} at step {step_number}")
            text = None
        elif text is not None and not isinstance(text, str):
            raise ValueError("Input_text must be a string")
        return PlanStep(
            step=int(step_number),
            task=task,
            input_text=text,
            input_images=images,
            output=WAIT,
        )
    except (ValidationError, ValueError, TypeError) as e:
        raise MalformedPlan(f"plan step {position}: {e}") from e


def parse_plan(data: Any) -> Plan:
    """
    Parse a planner reply: [{"ID", "Plan": [...]}], a bare {"ID", "Plan"} object,
    or a bare list of steps.

    Raises:
        MalformedPlan: shape or step contents do not parse
    """
    if isinstance(data, list) and data and isinstance(data[0], dict) and "Plan" in data[0]:
        data = data[0]
    if isinstance(data, dict):
        plan_id = str(data.get("ID", "0000"))
        steps = data.get("Plan")
    else:
        plan_id, steps = "0000", data
    if not isinstance(steps, list) or not steps:
        raise MalformedPlan("plan has no steps")
    return Plan(id=plan_id, steps=tuple(_parse_step(entry, i + 1) for i, entry in enumerate(steps)))


# --- validation ---


class ViolationKind(str, Enum):
    STEP_ORDER = "step_order"
    MISSING_TEXT = "missing_text"
    ADD_IMAGE_ARITY = "add_image_arity"
    UNKNOWN_TOOL = "unknown_tool"
    AMBIGUOUS_TOOL = "ambiguous_tool"
    ARITY = "arity"
    EXCLUSIVITY = "exclusivity"
    MAX_USES = "max_uses"
    DANGLING_PLACEHOLDER = "dangling_placeholder"
    ORIGINAL_OUT_OF_RANGE = "original_out_of_range"
    CONSECUTIVE_CAPTION = "consecutive_caption"


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ViolationKind
    step: Optional[int] = None
    message: str = ""


def resolve_step_tool(step: PlanStep, tools: Optional[list[ToolSpec]] = None) -> list[ToolSpec]:
    """Candidate tools for a Call_tool step: keyword matches, narrowed by image arity."""
    return narrow_by_arity(detect_tools(step.input_text, tools), len(step.input_images))


def step_tool(step: PlanStep, tools: Optional[list[ToolSpec]] = None) -> Optional[ToolSpec]:
    """
    The tool a Call_tool step runs, shared by validation and execution.

    A bound tool name wins; otherwise the step needs exactly one candidate.
    Returns None for unknown, unmatched or unbound ambiguous steps.
    """
    if step.tool is not None:
        return next((t for t in tools or TOOL_BOX if t.name == step.tool), None)
    candidates = resolve_step_tool(step, tools)
    return candidates[0] if len(candidates) == 1 else None


def validate_plan(
    plan: Plan, tools: Optional[list[ToolSpec]] = None, query_image_count: int = 0
) -> list[Violation]:
    """Every constraint violation in a plan. Violations are data, never raised."""
    tools = list(tools or TOOL_BOX)
    violations: list[Violation] = []

    previous = 0
    for step in plan.steps:
        if step.step <= previous:
            violations.append(
                Violation(kind=ViolationKind.STEP_ORDER, step=step.step, message=f"step {step.step} after {previous}")
            )
        previous = max(previous, step.step)

    used: dict[str, int] = {}
    produced = 0
    for step in plan.tool_steps():
        if not (step.input_text or "").strip():
            violations.append(Violation(kind=ViolationKind.MISSING_TEXT, step=step.step, message="Call_tool needs Input_text"))
        tool = step_tool(step, tools)
        candidates = resolve_step_tool(step, tools)
        if tool is None and step.tool is None and len(candidates) > 1:
            names = ", ".join(t.name for t in candidates)
            violations.append(
                Violation(kind=ViolationKind.AMBIGUOUS_TOOL, step=step.step, message=f"matches {names}; no tool bound")
            )
        elif tool is None:
            message = f"unknown tool {step.tool!r}" if step.tool else "no tool guidance phrase in Input_text"
            violations.append(Violation(kind=ViolationKind.UNKNOWN_TOOL, step=step.step, message=message))
        else:
            used[tool.name] = used.get(tool.name, 0) + 1
            if len(step.input_images) != tool.image_arity:
                violations.append(
                    Violation(
                        kind=ViolationKind.ARITY,
                        step=step.step,
                        message=f"{tool.name} takes {tool.image_arity} image(s), got {len(step.input_images)}",
                    )
                )
        # a tool may only consume images produced by earlier tool steps
        for placeholder in step.input_images:
            if placeholder.kind is PlaceholderKind.GENERATED and placeholder.index >= produced:
                violations.append(
                    Violation(
                        kind=ViolationKind.DANGLING_PLACEHOLDER,
                        step=step.step,
                        message=f"{placeholder} is not produced before step {step.step}",
                    )
                )
        if tool is not None:
            produced += tool.output_count(step.input_text or "")

    by_name = {tool.name: tool for tool in tools}
    exclusive = [name for name in used if by_name[name].exclusive]
    for name in exclusive:
        if used[name] > 1:
            violations.append(Violation(kind=ViolationKind.MAX_USES, message=f"{name} planned {used[name]} times"))
        others = sorted(set(used) - {name})
        if others:
            violations.append(
                Violation(kind=ViolationKind.EXCLUSIVITY, message=f"{name} cannot coexist with {', '.join(others)}")
            )

    last_task: Optional[StepTask] = None
    for step in plan.assembly_steps():
        if step.task is StepTask.ADD_IMAGE and len(step.input_images) != 1:
            violations.append(
                Violation(kind=ViolationKind.ADD_IMAGE_ARITY, step=step.step, message="AddImage takes exactly one image")
            )
        if step.task is StepTask.CAPTION:
            if not (step.input_text or "").strip():
                violations.append(Violation(kind=ViolationKind.MISSING_TEXT, step=step.step, message="Caption needs Input_text"))
            if last_task is StepTask.CAPTION:
                violations.append(
                    Violation(kind=ViolationKind.CONSECUTIVE_CAPTION, step=step.step, message="Caption follows a Caption")
                )
        for placeholder in step.input_images:
            if placeholder.kind is PlaceholderKind.GENERATED and placeholder.index >= produced:
                violations.append(
                    Violation(
                        kind=ViolationKind.DANGLING_PLACEHOLDER,
                        step=step.step,
                        message=f"{placeholder} is never produced",
                    )
                )
        last_task = step.task

    for step in plan.steps:
        for placeholder in step.input_images:
            if placeholder.kind is PlaceholderKind.ORIGINAL and placeholder.index > query_image_count:
                violations.append(
                    Violation(
                        kind=ViolationKind.ORIGINAL_OUT_OF_RANGE,
                        step=step.step,
                        message=f"{placeholder} but the query has {query_image_count} image(s)",
                    )
                )
    return violations
