"""Unsupervised dual grouping for semantically coherent OOD detection."""

__version__ = "0.1.0"
