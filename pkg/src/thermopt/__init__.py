"""Finite element solver and adjoint-based Robin boundary control for the
steady thermistor problem with temperature-vanishing conductivity."""

__version__ = "0.1.0"
