"""Sine eigenbasis of the Dirichlet Laplacian on (0, 1).

Fields are stored as arrays of sine coefficients ``x_n = <x, e_n>`` with
``e_n = sqrt(2) sin(n pi .)``; the last axis always indexes modes, so every
operator here also acts on batches of shape ``(..., N)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Basis:
    """First ``n_modes`` eigenpairs plus the matching collocation grid."""

    n_modes: int = 128

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {self.n_modes!r}")

    @cached_property
    def modes(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1, dtype=np.float64)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """lambda_n = n^2 pi^2."""
        return (np.pi * self.modes) ** 2

    @cached_property
    def grid(self) -> np.ndarray:
        """Interior points xi_j = j / (N + 1)."""
        return np.arange(1, self.n_modes + 1) / (self.n_modes + 1.0)

    @cached_property
    def sine_matrix(self) -> np.ndarray:
        """Symmetric matrix S[j, n] = sqrt(2) sin(pi j n / (N + 1)); S @ S = (N + 1) I."""
        j = np.arange(1, self.n_modes + 1)
        s = np.sqrt(2.0) * np.sin(np.pi * np.outer(j, j) / (self.n_modes + 1.0))
        s.setflags(write=False)
        return s

    def weighted_sine(self, multiplier: np.ndarray) -> np.ndarray:
        """Matrix mapping grid values to spectral coefficients scaled by ``multiplier``.

        ``v @ basis.weighted_sine(d)`` equals ``d * to_spectral(v)``; the schemes
        use it to fuse the back-transform with the linear substep.
        """
        return self.sine_matrix * (np.asarray(multiplier) / (self.n_modes + 1.0))[None, :]


def _check(x: np.ndarray, basis: Basis) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (basis.n_modes,):
        raise ValueError(
            f"dimension mismatch: expected trailing axis {basis.n_modes}, got shape {x.shape}")
    return x


def as_field(coeffs, basis: Basis) -> np.ndarray:
    """Validate a coefficient vector: right length, finite entries."""
    x = _check(coeffs, basis)
    if not np.all(np.isfinite(x)):
        raise ValueError("spectral field has non-finite entries")
    return x


def to_physical(field: np.ndarray, basis: Basis) -> np.ndarray:
    """Values sum_n x_n sqrt(2) sin(n pi xi_j) on the collocation grid."""
    return _check(field, basis) @ basis.sine_matrix


def to_spectral(values: np.ndarray, basis: Basis) -> np.ndarray:
    """Inverse of :func:`to_physical` (DST-I with quadrature weight 1/(N+1))."""
    return _check(values, basis) @ basis.sine_matrix / (basis.n_modes + 1.0)


def semigroup_factors(t: float, basis: Basis) -> np.ndarray:
    if t < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    f = np.exp(-basis.eigenvalues * t)
    # subnormal factors (lambda t in ~[708, 745]) make every product with them
    # an order of magnitude slower; their size is below 2.3e-308, so drop them
    f[f < np.finfo(np.float64).tiny] = 0.0
    return f


def resolvent_factors(dt: float, basis: Basis) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"resolvent step must be positive, got {dt}")
    return 1.0 / (1.0 + basis.eigenvalues * dt)


def apply_semigroup(field: np.ndarray, t: float, basis: Basis) -> np.ndarray:
    """e^{tA}: multiply mode n by exp(-lambda_n t)."""
    return _check(field, basis) * semigroup_factors(t, basis)


def apply_resolvent(field: np.ndarray, dt: float, basis: Basis) -> np.ndarray:
    """(I - dt A)^{-1}: multiply mode n by 1 / (1 + lambda_n dt)."""
    return _check(field, basis) * resolvent_factors(dt, basis)


def h_norm(field: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(field), axis=-1))


def fractional_norm(field: np.ndarray, alpha: float, basis: Basis) -> np.ndarray:
    """|(-A)^alpha x|_H; negative alpha gives the smoothing norms."""
    x = _check(field, basis)
    return np.sqrt(np.sum(basis.eigenvalues ** (2.0 * alpha) * x * x, axis=-1))


def sup_norm(field: np.ndarray, basis: Basis) -> np.ndarray:
    """Grid approximation of the sup norm |x|_E (max over the collocation points)."""
    return np.max(np.abs(to_physical(field, basis)), axis=-1)


def discrete_l2(values: np.ndarray, basis: Basis) -> np.ndarray:
    """Quadrature L^2 norm of grid values, weight 1/(N+1); equals |x|_H exactly."""
    return np.sqrt(np.sum(np.square(values), axis=-1) / (basis.n_modes + 1.0))


def sine_profile(amplitude: float, basis: Basis) -> np.ndarray:
    """Coefficients of the function ``amplitude * sin(pi xi)``."""
    x = np.zeros(basis.n_modes)
    x[0] = amplitude / np.sqrt(2.0)
    return x
