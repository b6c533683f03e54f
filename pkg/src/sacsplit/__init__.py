"""Spectral-Galerkin splitting schemes for the stochastic Allen-Cahn equation.

    dX = (A X + X - X^3) dt + dW   on (0, 1), Dirichlet boundary conditions,

with A the Laplacian and W a cylindrical Wiener process (space-time white
noise). Modules:

    spectral      sine eigenbasis, transforms, semigroup and resolvent
    nonlinearity  exact flow Phi_t of z' = z - z^3 and Psi_t = (Phi_t - id)/t
    noise         counter-based Gaussian streams, exact OU sampling, coupling
    schemes       exponential and semi-implicit Lie-Trotter schemes
    kolmogorov    tangent/second-variation probes and the Malliavin check
    harness       weak/strong error tables and rate fits
    cli           command-line front end (``sacsplit``)
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - source checkout without install
    __version__ = "0.1.0"
