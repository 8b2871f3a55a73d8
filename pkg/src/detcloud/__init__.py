"""Deterministic parallel guest kernel, guest runtime and job gateway."""

__version__ = "0.1.0"
