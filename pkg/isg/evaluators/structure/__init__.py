"""
Structure Evaluator

Predicts the interleaved structure a query asks for and matches it against an answer.
"""

from .evaluator import (
    StructuralVerdict,
    StructurePrediction,
    match_structures,
    predict_structure,
    structural_score,
)

__all__ = [
    "StructurePrediction",
    "StructuralVerdict",
    "predict_structure",
    "match_structures",
    "structural_score",
]
