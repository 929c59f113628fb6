"""Bi-level process design and control with policy-gradient controllers."""

__version__ = "0.1.0"
