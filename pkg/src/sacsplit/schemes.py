"""Lie-Trotter splitting schemes for the stochastic Allen-Cahn equation.

Each step first applies the exact flow Phi_dt of z' = z - z^3 pointwise on the
collocation grid, then advances dX = AX dt + dW either exactly
(``exponential``) or by a linear implicit Euler step (``semi_implicit``):

    exponential:    X_{n+1} = e^{dt A} Phi_dt(X_n) + int e^{((n+1) dt - s) A} dW(s)
    semi_implicit:  X_{n+1} = S_dt Phi_dt(X_n) + S_dt (W((n+1) dt) - W(n dt)),
                    S_dt = (I - dt A)^{-1}

``drift="linear"`` replaces the flow by the identity (Psi = 0), which turns both
schemes into integrators of the linear stochastic heat equation with
closed-form laws.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nonlinearity as nl
from .noise import PRIMARY, SECONDARY, CoarseAccumulator, SeedPlan, StepNoise
from .spectral import (Basis, as_field, resolvent_factors, semigroup_factors, sine_profile,
                       to_physical, to_spectral)

EXPONENTIAL = "exponential"
SEMI_IMPLICIT = "semi_implicit"
KINDS = (EXPONENTIAL, SEMI_IMPLICIT)
DRIFTS = ("allen_cahn", "linear")

DT_MAX = 1.0
DIVERGENCE_THRESHOLD = 1e6
DEFAULT_AMPLITUDE = 0.2


def default_initial(basis: Basis) -> np.ndarray:
    """x0(xi) = 0.2 sin(pi xi)."""
    return sine_profile(DEFAULT_AMPLITUDE, basis)


def steps_for(T: float, dt: float) -> int:
    """Number of steps N with T = N dt; raises unless the ratio is an integer."""
    if not dt > 0 or not T > 0:
        raise ValueError(f"T and dt must be positive, got T={T}, dt={dt}")
    n = round(T / dt)
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown scheme {kind!r}; expected one of {KINDS}")


def _check_drift(drift):
    if drift not in DRIFTS:
        raise ValueError(f"unknown drift {drift!r}; expected one of {DRIFTS}")


@dataclass(frozen=True)
class SchemeSpec:
    kind: str
    dt: float
    T: float
    basis: Basis = field(default_factory=Basis)
    x0: np.ndarray | None = None
    drift: str = "allen_cahn"
    noise: bool = True

    def __post_init__(self):
        _check_kind(self.kind)
        _check_drift(self.drift)
        if self.dt > DT_MAX:
            raise ValueError(f"dt={self.dt} exceeds the admissible maximum {DT_MAX}")
        steps_for(self.T, self.dt)
        x0 = default_initial(self.basis) if self.x0 is None else as_field(self.x0, self.basis)
        object.__setattr__(self, "x0", x0)

    @property
    def n_steps(self) -> int:
        return steps_for(self.T, self.dt)

    def with_dt(self, dt: float) -> "SchemeSpec":
        return SchemeSpec(self.kind, dt, self.T, self.basis, self.x0, self.drift, self.noise)


class Terminal(NamedTuple):
    fields: np.ndarray   # (batch, N) terminal coefficients
    flagged: np.ndarray  # (batch,) True where a grid value left [-1e6, 1e6] or went NaN


# ---------------------------------------------------------------------------
# single steps, written directly from the definitions


def _flow_substep(x, dt, basis, drift):
    if drift == "linear":
        return np.asarray(x, dtype=np.float64)
    return to_spectral(nl.phi(dt, to_physical(x, basis)), basis)


def step_exponential(x, dt, noise_conv, basis: Basis, drift: str = "allen_cahn"):
    """e^{dt A} Phi_dt(x) + noise_conv."""
    _check_drift(drift)
    y = _flow_substep(x, dt, basis, drift) * semigroup_factors(dt, basis)
    return y + np.asarray(noise_conv)


def step_semi_implicit(x, dt, white_inc, basis: Basis, drift: str = "allen_cahn"):
    """S_dt (Phi_dt(x) + white_inc)."""
    _check_drift(drift)
    return (_flow_substep(x, dt, basis, drift) + np.asarray(white_inc)) * resolvent_factors(dt, basis)


# ---------------------------------------------------------------------------
# batched integrator state


class _Integrator:
    """One scheme at one step size, advancing a batch of paths in place."""

    def __init__(self, kind, dt, basis: Basis, x0, batch, drift):
        self.kind = kind
        self.dt = dt
        self.basis = basis
        self.linear = drift == "linear"
        factor = semigroup_factors(dt, basis) if kind == EXPONENTIAL else resolvent_factors(dt, basis)
        self.factor = factor
        self.lin_matrix = basis.weighted_sine(factor)
        self.x = np.repeat(np.asarray(x0, dtype=np.float64)[None, :], batch, axis=0)
        self.grid = np.empty_like(self.x)
        self.tmp = np.empty_like(self.x)
        self.row_max = np.zeros(batch)

    def step(self, conv=None, white=None):
        """Advance one step with the matching noise input (either may be None = no noise)."""
        if self.linear:
            self.x *= self.factor
        else:
            np.matmul(self.x, self.basis.sine_matrix, out=self.grid)
            nl.flow_rows(self.grid, self.dt, self.row_max)
            np.matmul(self.grid, self.lin_matrix, out=self.x)
        if self.kind == EXPONENTIAL:
            if conv is not None:
                self.x += conv
        elif white is not None:
            np.multiply(white, self.factor, out=self.tmp)
            self.x += self.tmp

    def finish(self) -> Terminal:
        np.matmul(self.x, self.basis.sine_matrix, out=self.grid)
        nl.identity_rows(self.grid, 0.0, self.row_max)
        flagged = ~(self.row_max <= DIVERGENCE_THRESHOLD)
        return Terminal(self.x, flagged)


def simulate_terminal(spec: SchemeSpec, plan: SeedPlan, samples=0, replica: int = 0) -> Terminal:
    """Run ``spec`` for the given sample indices with noise drawn at resolution ``spec.dt``.

    A scalar sample index returns fields of shape (N,) and a scalar flag.
    """
    scalar = np.ndim(samples) == 0
    samples = np.atleast_1d(np.asarray(samples, dtype=np.int64))
    basis = spec.basis
    sn = StepNoise(basis, spec.dt)
    integ = _Integrator(spec.kind, spec.dt, basis, spec.x0, samples.shape[0], spec.drift)
    z0 = np.empty((samples.shape[0], basis.n_modes))
    z1 = np.empty_like(z0)
    for n in range(spec.n_steps):
        if not spec.noise:
            integ.step()
            continue
        plan.normals(PRIMARY, spec.dt, n, samples, basis.n_modes, replica, out=z0)
        if spec.kind == EXPONENTIAL:
            integ.step(conv=sn.convolution(z0, out=z0))
        else:
            plan.normals(SECONDARY, spec.dt, n, samples, basis.n_modes, replica, out=z1)
            integ.step(white=sn.white(z0, z1, out=z0))
    out = integ.finish()
    if scalar:
        return Terminal(out.fields[0], bool(out.flagged[0]))
    return out


def simulate_reference(spec_fine: SchemeSpec, plan: SeedPlan, samples=0, replica: int = 0) -> Terminal:
    """Reference proxy for X(T): the exponential scheme at the fine step."""
    ref = SchemeSpec(EXPONENTIAL, spec_fine.dt, spec_fine.T, spec_fine.basis, spec_fine.x0,
                     spec_fine.drift, spec_fine.noise)
    return simulate_terminal(ref, plan, samples, replica)


# ---------------------------------------------------------------------------
# coupled ladder: every level driven by aggregates of one fine noise path


@dataclass(frozen=True)
class Level:
    kind: str
    m: int  # coarse step = m * fine step

    def __post_init__(self):
        _check_kind(self.kind)
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"level factor must be a positive integer, got {self.m}")


def simulate_coupled(levels, basis: Basis, dt_fine: float, T: float, x0, plan: SeedPlan,
                     samples, drift: str = "allen_cahn", replica: int = 0,
                     noise: bool = True) -> dict:
    """Simulate several (scheme, step) levels on one shared fine noise path.

    ``levels`` is an iterable of :class:`Level`; ``Level(EXPONENTIAL, 1)`` is the
    fine reference. Coarse inputs are exact aggregates of the fine (C, dW)
    pairs, so all levels see the same Brownian path. Returns
    ``{level: Terminal}``.
    """
    _check_drift(drift)
    levels = list(dict.fromkeys(levels))
    n_fine = steps_for(T, dt_fine)
    for lev in levels:
        if n_fine % lev.m:
            raise ValueError(f"level step {lev.m} x dt_fine does not divide T={T}")
        if lev.m * dt_fine > DT_MAX * (1 + 1e-12):
            raise ValueError(f"level step {lev.m * dt_fine} exceeds {DT_MAX}")
    samples = np.atleast_1d(np.asarray(samples, dtype=np.int64))
    batch = samples.shape[0]
    need_white = noise and any(lev.kind == SEMI_IMPLICIT for lev in levels)
    sn = StepNoise(basis, dt_fine)

    integ = {lev: _Integrator(lev.kind, lev.m * dt_fine, basis, x0, batch, drift) for lev in levels}
    by_m = {}
    for lev in levels:
        by_m.setdefault(lev.m, []).append(lev)

    # aggregation tree: each coarse factor collects from its largest proper divisor
    # present among the levels, so most fine steps touch a single accumulator
    nodes = sorted(m for m in by_m if m > 1) if noise else []
    parent = {m: max([1] + [p for p in nodes if p < m and m % p == 0]) for m in nodes}
    children = {m: [c for c in nodes if parent[c] == m] for m in [1] + nodes}
    acc = {m: CoarseAccumulator(basis, parent[m] * dt_fine, m // parent[m], batch,
                                white=need_white) for m in nodes}

    z0 = np.empty((batch, basis.n_modes))
    z1 = np.empty_like(z0)
    conv = np.empty_like(z0)
    white = np.empty_like(z0) if need_white else None
    for n in range(n_fine):
        if not noise:
            for lev, it in integ.items():
                if (n + 1) % lev.m == 0:
                    it.step()
            continue
        plan.normals(PRIMARY, dt_fine, n, samples, basis.n_modes, replica, out=z0)
        if need_white:
            plan.normals(SECONDARY, dt_fine, n, samples, basis.n_modes, replica, out=z1)
            sn.white(z0, z1, out=white)
        sn.convolution(z0, out=conv)
        for lev in by_m.get(1, ()):
            integ[lev].step(conv=conv, white=white)
        for c in children[1]:
            acc[c].push(conv, white)
        for m in nodes:
            a = acc[m]
            if a.count < a.m:
                continue
            for c in children[m]:
                acc[c].push(a.conv, a.white)
            for lev in by_m[m]:
                integ[lev].step(conv=a.conv, white=a.white)
            a.reset()
    return {lev: it.finish() for lev, it in integ.items()}
