"""Spectral Galerkin toolkit for stochastic second-grade fluids on the 2D torus.

The package builds a divergence-free trigonometric basis, assembles the
Galerkin-projected operators of the damped/dispersive momentum equation,
integrates the stochastic and controlled deterministic dynamics, minimizes
the large-deviation action over control paths, and runs small-noise Monte
Carlo sweeps with reproducible, counter-based randomness.
"""

__version__ = "0.1.0"
