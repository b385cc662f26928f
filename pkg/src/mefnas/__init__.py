"""Latency-constrained architecture search for robust multi-exposure image fusion."""

__version__ = "0.1.0"
