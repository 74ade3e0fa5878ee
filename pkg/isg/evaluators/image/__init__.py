"""
Image Evaluator

Checks the content of each generated image with a prerequisite-gated question graph.
"""

from .evaluator import (
    ImageLevelResult,
    ImageOutcome,
    ImageQuestion,
    ImageRequirement,
    ImageTuple,
    ImageVerdict,
    TupleKind,
    evaluate_image_level,
    evaluate_question_dag,
    extract_image_tuples,
    generate_image_questions,
    order_question_dag,
    score_image_level,
)

__all__ = [
    "ImageRequirement",
    "TupleKind",
    "ImageTuple",
    "ImageQuestion",
    "ImageOutcome",
    "ImageVerdict",
    "ImageLevelResult",
    "extract_image_tuples",
    "generate_image_questions",
    "order_question_dag",
    "evaluate_question_dag",
    "score_image_level",
    "evaluate_image_level",
]
