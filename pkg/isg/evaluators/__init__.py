"""Evaluation levels: structure, block, image and holistic."""
