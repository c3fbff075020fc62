"""Anomaly-aware text anchors and patch alignment for a miniature dual encoder."""

__version__ = "0.1.0"
