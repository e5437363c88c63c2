"""Minimal-intervention shared control with certified control-invariant sets."""

__version__ = "0.1.0"
