"""Finite-chain laboratory for quasi-adiabatic continuation (spectral flow)."""

__version__ = "0.1.0"
