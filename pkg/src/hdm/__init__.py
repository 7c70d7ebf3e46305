"""Hemodynamic decomposition: sparse gamma-kernel fits of fNIRS-style signals
and a sliding-window classification harness built on them."""

__version__ = "0.1.0"
