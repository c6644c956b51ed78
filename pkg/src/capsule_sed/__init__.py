"""Capsule routing networks for weakly-labeled sound event detection."""

__version__ = "0.1.0"
