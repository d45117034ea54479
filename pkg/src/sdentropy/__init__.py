"""Relative-entropy convergence of Euler-Maruyama for multiplicative-noise SDEs.

Coupled Brownian lattices, Euler-Maruyama and Milstein integrators, Gaussian
KDE on quadrature grids, discrete divergences, and Malliavin-calculus
diagnostics of the Euler chain.
"""

__version__ = "0.1.0"
