"""Unsupervised landmark discovery from unpaired marked and unmarked images."""

__version__ = "0.1.0"
