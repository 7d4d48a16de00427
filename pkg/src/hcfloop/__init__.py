"""Recirculating-loop simulator for comparing hollow-core and standard fibre."""

__version__ = "0.1.0"
