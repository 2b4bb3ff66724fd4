"""Crowd-flow prediction attacks and the consistency/validity detector."""

__version__ = "0.1.0"
