"""Instructor/Worker LLM toolkit for hourly air-quality histories."""

__version__ = "0.1.0"
