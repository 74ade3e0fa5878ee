"""
Planner: asks the model for a tool plan that answers an interleaved query.
"""

import logging
from typing import Optional, Union

from isg.agent.plan import Plan, Placeholder, parse_plan
from isg.content import BlockKind, ImageRef, InterleavedSequence
from isg.errors import MalformedPlan, NoJsonFound
from isg.gateway import Gateway, extract_json
from isg.prompts import AGENT_PLANNING_EXAMPLE, AGENT_PLANNING_PROMPT

logger = logging.getLogger(__name__)


def query_parts(query: InterleavedSequence) -> list[Union[str, ImageRef]]:
    """Query blocks as prompt parts, images labelled with their #imageN# placeholder."""
    parts: list[Union[str, ImageRef]] = []
    image_index = 0
    for block in query.blocks:
        if block.kind is BlockKind.TEXT:
            parts.append(block.text)
        else:
            image_index += 1
            parts.append(f"{Placeholder.original(image_index)}:")
            parts.append(block.image)
    return parts


async def build_plan(
    query: InterleavedSequence,
    gateway: Gateway,
    rejected: Optional[list[str]] = None,
) -> Plan:
    """
    Ask for a plan. When re-planning, the reasons the previous plan was rejected are
    listed so the new request differs from the first one.

    Raises:
        MalformedPlan: the reply has no JSON or does not parse as a plan
    """
    parts: list[Union[str, ImageRef]] = ["## Query", *query_parts(query)]
    purpose = "agent.plan"
    if rejected is not None:
        purpose = "agent.replan"
        parts.append("## Your previous plan was rejected")
        parts.extend(f"- {reason}" for reason in rejected)
        parts.append("Write the whole plan again from scratch.")

    request = gateway.request(f"{AGENT_PLANNING_PROMPT}\n\n{AGENT_PLANNING_EXAMPLE}", *parts)
    response = await gateway.complete(request, purpose=purpose)
    try:
        data = extract_json(response.text)
    except NoJsonFound as e:
        raise MalformedPlan(f"planner reply has no JSON: {e}") from e
    plan = parse_plan(data)
    logger.info(f"Planned {len(plan.steps)} steps ({len(plan.tool_steps())} tool calls)")
    return plan
