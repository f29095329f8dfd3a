"""Optimal-control EEG source reconstruction with P1 finite elements."""

__version__ = "0.1.0"
