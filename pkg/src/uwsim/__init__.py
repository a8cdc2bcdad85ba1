"""Underwater image synthesis, fitting, quality metrics, and detection losses."""

__version__ = "0.1.0"
