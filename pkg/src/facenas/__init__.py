"""Latency-aware architecture search with a weight-sharing supernetwork and a recurrent controller."""

__version__ = "0.1.0"
