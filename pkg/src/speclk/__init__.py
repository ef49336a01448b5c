"""Acceptance-rate training objectives and a speculative sampling laboratory."""

__version__ = "0.1.0"
