"""Multipath channel simulation, estimation, and multi-step prediction."""

__version__ = "0.1.0"
