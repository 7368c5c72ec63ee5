"""Nehari-manifold solver and verification toolkit for n-Kirchhoff
equations with exponential nonlinearities."""

__version__ = "0.1.0"
