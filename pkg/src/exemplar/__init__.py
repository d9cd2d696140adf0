"""Exemplar-based unsupervised feature learning: surrogate classes, a small CNN, and evaluation tools."""
__version__ = "0.1.0"
