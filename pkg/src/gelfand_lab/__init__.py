"""Numerical laboratory for the Gel'fand problem -Δu = λe^u on planar domains."""

__version__ = "0.1.0"
