"""Floating-point chaos probes for a deterministic toy transformer."""

__version__ = "0.1.0"
