"""Quenched central limit laboratory for stationary random fields on Z^d."""

__version__ = "0.1.0"
