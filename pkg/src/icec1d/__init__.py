"""Quasi-one-dimensional e- + NeHe+ scattering and its entanglement dynamics."""

__version__ = "0.1.0"
