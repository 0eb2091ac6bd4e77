"""Numerical laboratory for relativistic velocity-alignment ensembles coupled
to an incompressible pseudo-spectral flow on the periodic unit box."""

__version__ = "0.1.0"
