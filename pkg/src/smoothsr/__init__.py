"""Smooth symbolic regression: fixed-shape trees as real-valued optimization problems."""

__version__ = "0.1.0"
