"""
Block Evaluator

Checks requirements between blocks (text-text, text-image, image-image) with
triplet-derived questions.
"""

from .evaluator import (
    BlockJudgment,
    BlockLevelResult,
    BlockQuestion,
    RelationTuple,
    evaluate_block_level,
    extract_relation_tuples,
    generate_block_questions,
    judge_block_question,
    score_block_level,
)

__all__ = [
    "RelationTuple",
    "BlockQuestion",
    "BlockJudgment",
    "BlockLevelResult",
    "extract_relation_tuples",
    "generate_block_questions",
    "judge_block_question",
    "score_block_level",
    "evaluate_block_level",
]
