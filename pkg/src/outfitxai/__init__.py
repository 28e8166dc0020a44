"""Interpretable outfit grading with item-feature influence values."""
__version__ = "0.1.0"
