"""Data-free spectral operator learning for incompressible Navier-Stokes."""

__version__ = "0.1.0"
