"""Resonance geometry, dyadic norms and spectral simulators for quasilinear
Klein-Gordon systems and the electron Euler-Maxwell system."""

__version__ = "0.1.0"
