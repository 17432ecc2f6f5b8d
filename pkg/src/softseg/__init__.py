"""Soft-label segmentation toolkit for explainable Gleason grading."""

__version__ = "0.1.0"
