"""Augmentation search over a corpus of tables using gram-matrix sketches."""

__version__ = "0.1.0"
