"""Implicit upwind finite volumes with logarithmic Kantorovich-Rubinstein error measurement."""

__version__ = "0.1.0"
