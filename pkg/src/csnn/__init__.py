"""Compact support neural networks: neurons with bounded support for OOD detection."""

__version__ = "0.1.0"
