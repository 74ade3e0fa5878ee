"""Interleaved text-and-image generation: scene-graph evaluation and a Plan-Execute-Refine agent."""

__version__ = "1.0.0"
