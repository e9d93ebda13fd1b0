"""Rigid head stabilization by carving a stable hull from per-scan signed distance fields."""

__version__ = "0.1.0"
