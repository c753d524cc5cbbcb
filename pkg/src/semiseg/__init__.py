"""Semantic-branch instance segmentation with two-stage semi-supervised training, at desk scale."""

__version__ = "0.1.0"
