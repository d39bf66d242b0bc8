"""Vital-data analysis at the edge and in a micro-batch cloud pipeline."""

__version__ = "0.1.0"
