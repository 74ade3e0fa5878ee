"""
Holistic Evaluator

Judges the whole answer against the query and, optionally, the golden answer.
"""

from .evaluator import DIMENSIONS, HolisticJudgment, holistic_aggregate, judge_holistic

__all__ = ["DIMENSIONS", "HolisticJudgment", "judge_holistic", "holistic_aggregate"]
