"""Toy, deterministic streaming omni-modal inference pipeline."""

__version__ = "0.1.0"
