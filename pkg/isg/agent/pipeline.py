"""
Plan, execute and refine: the answer-generation agent end to end.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional

from isg.agent.refiner import RefinedAnswer, RefinementBudget, Refiner
from isg.agent.tools import TOOL_BOX, ToolClient, ToolSpec
from isg.content import InterleavedSequence
from isg.errors import RefinementExhausted
from isg.gateway import Gateway

logger = logging.getLogger(__name__)


class AgentPipeline:
    """
    Runs the planner, the executor and the refiner in sequence for one query.

    The pipeline never raises for plan or tool trouble: an exhausted refinement
    budget comes back as a best-effort answer carrying failure flags.
    """

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

    async def run(self, query: InterleavedSequence) -> RefinedAnswer:
        refiner = Refiner(self.gateway, self.client, self.tools, self.budget, self.smooth)
        plan, outcome = await refiner.plan_and_attempt(query)
        try:
            result = await refiner.refine(plan, outcome, query)
        except RefinementExhausted as e:
            logger.error(f"Refinement exhausted: {e}")
            return e.best_effort
        logger.info(
            f"Answer ready: {len(result.answer)} blocks, {result.replans} re-plan(s), smoothing {result.smoothing}"
        )
        return result


def write_agent_output(result: RefinedAnswer, answer_path: Path) -> dict[str, Any]:
    """
    Write the answer document (generated images under images/ beside it) and the
    final plan as <stem>.plan.json. Returns the run summary.
    """
    result.answer.dump(answer_path, image_dir=answer_path.parent / "images")
    if result.plan is not None:
        with open(answer_path.with_suffix(".plan.json"), "w", encoding="utf-8") as f:
            json.dump(result.plan.to_json(), f, indent=2, ensure_ascii=False)
            f.write("\n")
    return {
        "blocks": len(result.answer),
        "flags": result.flags,
        "replans": result.replans,
        "regenerations": {str(k): v for k, v in sorted(result.regenerations.items())},
        "smoothing": result.smoothing,
    }
