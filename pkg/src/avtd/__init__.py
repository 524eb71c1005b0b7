"""Validation-TD model selection for SAC critics, on numpy."""

__version__ = "0.1.0"
