"""Evolutionary architecture search for multimodal sEMG+ACC gesture classifiers."""

__version__ = "0.1.0"
