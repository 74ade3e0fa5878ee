"""Plan-Execute-Refine agent that writes interleaved text-and-image answers."""

from isg.agent.pipeline import AgentPipeline, write_agent_output
from isg.agent.refiner import RefinedAnswer, RefinementBudget

__all__ = ["AgentPipeline", "RefinedAnswer", "RefinementBudget", "write_agent_output"]
