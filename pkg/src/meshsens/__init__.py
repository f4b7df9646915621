"""Mesh sensitivity of P1 finite element solutions."""

__version__ = "0.1.0"
