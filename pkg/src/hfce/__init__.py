"""Hybrid near/far-field THz UM-MIMO channel simulation and estimation."""

__version__ = "0.1.0"
