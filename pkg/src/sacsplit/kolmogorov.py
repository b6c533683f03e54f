"""Monte Carlo probes of u(t, x) = E[phi(X(t, x))] for the auxiliary equation

    dX = A X dt + Psi_dt(X) dt + dW,

through its first and second variations

    d eta/dt  = A eta  + Psi_dt'(X) eta,                      eta(0)  = h
    d zeta/dt = A zeta + Psi_dt'(X) zeta + Psi_dt''(X) eta^h eta^k,   zeta(0) = 0

so that Du(t, x).h = E[Dphi(X(t)).eta^h(t)] and
D^2u(t, x).(h, k) = E[Dphi(X(t)).zeta^{h,k}(t) + D^2phi(X(t)).(eta^h(t), eta^k(t))].

The carrying path uses the exponential Euler step with substep ``delta``
(identical to the exponential splitting scheme when delta equals the
regularization step). The variations follow the same substeps: with X frozen,
the reaction part (pointwise on the collocation grid) is solved exactly, then
e^{delta A} is applied. Since Psi' <= e^{dt}, each substep grows |eta|_H by at
most exp(delta (e^{dt} - lambda_1)), the discrete form of the energy estimate
checked along every path. The first probe step is graded geometrically so that
the fast decay of high-mode directions is resolved (see :func:`probe_mesh`).

Also here: the Malliavin derivative D_s X_k of the semi-implicit scheme,
propagated by the chain rule D_s X_{k+1} = S_dt Phi_dt'(X_k) D_s X_k.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nonlinearity as nl
from .harness import ArrayMoments, TestFunction, fmt, map_blocks
from .noise import PRIMARY, SECONDARY, SeedPlan, StepNoise
from .schemes import DRIFTS, DT_MAX, default_initial, steps_for
from .spectral import (Basis, as_field, resolvent_factors, semigroup_factors, to_physical,
                       to_spectral)

DEFAULT_PROBE_DT = 0.0125
DEFAULT_T_GRID = tuple(round(0.1 * i, 10) for i in range(1, 11))
DEFAULT_MODES = tuple(range(1, 17))
PROBE = "probe"
GRADED = "probe_graded"
GRADING_LEVELS = 24
GRADING_FLOOR = 2.0 ** -9
ENERGY_SLACK = 1e-12  # relative round-off allowance in the pathwise energy bound


def _check_drift(drift):
    if drift not in DRIFTS:
        raise ValueError(f"unknown drift {drift!r}; expected one of {DRIFTS}")


def _reaction_terms(x_grid, h, drift_dt, drift):
    """Grid factors of the exact reaction substep for X frozen at ``x_grid``.

    With c = Psi'(X), d = Psi''(X) the system eta' = c eta, zeta' = c zeta + d eta^h eta^k
    gives eta(h) = e^{ch} eta and zeta(h) = e^{ch} zeta + d e^{ch} (e^{ch} - 1)/c eta^h eta^k.
    Returns (e^{ch}, d e^{ch} (e^{ch} - 1)/c).
    """
    if drift == "linear":
        return np.ones_like(x_grid), np.zeros_like(x_grid)
    c = nl.psi_prime(drift_dt, x_grid)
    ch = c * h
    growth = np.exp(ch)
    small = np.abs(ch) < 1e-8
    w = np.where(small, h * (1.0 + 0.5 * ch), np.expm1(ch) / np.where(small, 1.0, c))
    return growth, nl.psi_second(drift_dt, x_grid) * growth * w


def _lift(a, target):
    # broadcast per-state grid quantities over a direction axis
    return a[..., None, :] if target.ndim == a.ndim + 1 else a


def evolve_tangent(x, eta, delta: float, basis: Basis, drift_dt: float | None = None,
                   drift: str = "allen_cahn") -> np.ndarray:
    """One substep eta -> e^{delta A} [exp(delta Psi'(X)) eta] along the state ``x``.

    ``x`` is the carrying field at the start of the substep; ``eta`` has the
    shape of ``x`` or one extra direction axis before the mode axis.
    """
    _check_drift(drift)
    x = as_field(x, basis)
    eta = as_field(eta, basis)
    drift_dt = delta if drift_dt is None else drift_dt
    growth, _ = _reaction_terms(to_physical(x, basis), delta, drift_dt, drift)
    g = to_physical(eta, basis) * _lift(growth, eta)
    return to_spectral(g, basis) * semigroup_factors(delta, basis)


def evolve_second_variation(x, eta_h, eta_k, zeta, delta: float, basis: Basis,
                            drift_dt: float | None = None, drift: str = "allen_cahn") -> np.ndarray:
    """One substep of the second variation: the reaction part with source
    Psi''(X) eta^h eta^k solved exactly on the grid (X frozen), then e^{delta A}."""
    _check_drift(drift)
    x = as_field(x, basis)
    eta_h = as_field(eta_h, basis)
    eta_k = as_field(eta_k, basis)
    zeta = as_field(zeta, basis)
    drift_dt = delta if drift_dt is None else drift_dt
    growth, curv = _reaction_terms(to_physical(x, basis), delta, drift_dt, drift)
    src = to_physical(eta_h, basis) * to_physical(eta_k, basis)
    z = _lift(growth, zeta) * to_physical(zeta, basis) + _lift(curv, zeta) * src
    return to_spectral(z, basis) * semigroup_factors(delta, basis)


def carrying_step(x, delta: float, conv, basis: Basis, drift_dt: float | None = None,
                  drift: str = "allen_cahn") -> np.ndarray:
    """Exponential Euler step e^{delta A}(X + delta Psi_dt(X)) + conv for the auxiliary equation."""
    _check_drift(drift)
    x = as_field(x, basis)
    drift_dt = delta if drift_dt is None else drift_dt
    if drift == "linear":
        y = x
    else:
        g = to_physical(x, basis)
        # X + delta Psi_delta(X) is exactly the flow Phi_delta(X)
        g = nl.phi(delta, g) if drift_dt == delta else g + delta * nl.psi(drift_dt, g)
        y = to_spectral(g, basis)
    return y * semigroup_factors(delta, basis) + np.asarray(conv)


@dataclass
class TangentState:
    """Carrying field plus first variations (one per direction) and second variations."""

    x: np.ndarray                 # (..., N)
    eta: np.ndarray               # (..., H, N)
    zeta: np.ndarray | None = None  # (..., P, N) for ``pairs``
    pairs: tuple = ()
    t: float = 0.0

    @classmethod
    def start(cls, x, directions, pairs=(), batch: int | None = None) -> "TangentState":
        x = np.asarray(x, dtype=np.float64)
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        if batch is not None:
            x = np.repeat(x[None, :], batch, axis=0)
        eta = np.broadcast_to(directions, x.shape[:-1] + directions.shape).copy()
        zeta = np.zeros(x.shape[:-1] + (len(pairs), x.shape[-1])) if pairs else None
        return cls(x, eta, zeta, tuple(pairs), 0.0)

    def step(self, delta: float, conv, basis: Basis, drift_dt: float | None = None,
             drift: str = "allen_cahn"):
        """Advance variations along the current state, then the state itself."""
        drift_dt = delta if drift_dt is None else drift_dt
        if self.zeta is not None:
            hi = [p[0] for p in self.pairs]
            ki = [p[1] for p in self.pairs]
            self.zeta = evolve_second_variation(self.x, self.eta[..., hi, :], self.eta[..., ki, :],
                                                self.zeta, delta, basis, drift_dt, drift)
        self.eta = evolve_tangent(self.x, self.eta, delta, basis, drift_dt, drift)
        self.x = carrying_step(self.x, delta, conv, basis, drift_dt, drift)
        self.t += delta
        return self


# ---------------------------------------------------------------------------
# batched Monte Carlo engine


def energy_growth(t: float, basis: Basis, dt0: float = DT_MAX) -> float:
    """exp((e^{dt0} - lambda_1) t): bound on |eta(t)|_H / |h|_H."""
    return math.exp((math.exp(dt0) - basis.eigenvalues[0]) * t)


def all_pairs(modes) -> tuple:
    return tuple(combinations_with_replacement(modes, 2))


def probe_mesh(delta: float, t_end: float, levels: int = GRADING_LEVELS,
               floor: float = GRADING_FLOOR) -> list:
    """Substeps (size, stream, counter) covering [0, t_end].

    [0, delta] is split geometrically at delta q^levels, ..., delta q, delta with
    q = floor^(1/levels); afterwards the step is delta. Variations started at
    e_n decay like e^{-lambda_n s}; the graded start resolves that decay for
    lambda_n delta >> 1, where a single explicit step would overweight the
    source of the second variation by a factor ~ lambda_n delta.
    """
    n = steps_for(t_end, delta)
    if levels < 0 or not 0 < floor <= 1:
        raise ValueError("grading needs levels >= 0 and floor in (0, 1]")
    mesh = []
    if levels == 0:
        mesh.append((delta, PRIMARY, 0))
    else:
        q = floor ** (1.0 / levels)
        pts = [0.0] + [delta * q ** (levels - i) for i in range(levels + 1)]
        mesh.extend((b - a, GRADED, j) for j, (a, b) in enumerate(zip(pts[:-1], pts[1:])))
    mesh.extend((delta, PRIMARY, k) for k in range(1, n))
    return mesh


@dataclass(frozen=True)
class ProbeConfig:
    t_grid: tuple = DEFAULT_T_GRID
    modes: tuple = DEFAULT_MODES          # directions h = e_n
    pairs: tuple | None = None            # (n, m) pairs for D^2u; None -> all n <= m
    second: bool = True
    dt: float = DEFAULT_PROBE_DT          # step delta
    drift_dt: float | None = None         # regularization step of Psi; None -> dt
    grading: int = GRADING_LEVELS         # geometric substeps on [0, delta]; 0 disables
    grading_floor: float = GRADING_FLOOR  # first substep / delta
    n_modes: int = 128
    M: int = 10_000
    seed: int = 0
    x0: np.ndarray | None = None
    drift: str = "allen_cahn"
    noise: bool = True
    phi: TestFunction = field(default_factory=lambda: TestFunction("cosine"))
    block_size: int = 100
    threads: int = 1
    replica: int = 0

    def __post_init__(self):
        object.__setattr__(self, "t_grid", tuple(sorted(float(t) for t in self.t_grid)))
        object.__setattr__(self, "modes", tuple(int(n) for n in self.modes))
        if self.pairs is None:
            object.__setattr__(self, "pairs", all_pairs(self.modes) if self.second else ())
        else:
            object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))
        _check_drift(self.drift)
        if not self.t_grid or self.t_grid[0] <= 0:
            raise ValueError("probe times must be positive")
        if not 0 < self.dt <= DT_MAX:
            raise ValueError(f"probe step must lie in (0, {DT_MAX}]")
        if self.drift_dt is not None and not self.dt <= self.drift_dt <= DT_MAX:
            # the explicit drift kick X + h Psi_dt(X) is unstable for h much larger than dt
            raise ValueError(f"drift_dt must lie in [dt, {DT_MAX}], got {self.drift_dt}")
        for t in self.t_grid:
            steps_for(t, self.dt)
        probe_mesh(self.dt, self.dt, self.grading, self.grading_floor)
        for n in self.modes + tuple(p for pr in self.pairs for p in pr):
            if not 1 <= n <= self.n_modes:
                raise ValueError(f"mode {n} outside 1..{self.n_modes}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"M must be an integer >= 2, got {self.M}")

    @property
    def basis(self) -> Basis:
        return Basis(self.n_modes)

    @property
    def psi_dt(self) -> float:
        return self.dt if self.drift_dt is None else self.drift_dt

    def initial(self) -> np.ndarray:
        return default_initial(self.basis) if self.x0 is None else as_field(self.x0, self.basis)

    def mesh(self) -> list:
        return probe_mesh(self.dt, self.t_grid[-1], self.grading, self.grading_floor)

    @property
    def direction_modes(self) -> tuple:
        return tuple(sorted(set(self.modes) | {p for pr in self.pairs for p in pr}))

    def directions(self) -> np.ndarray:
        """Unit directions: e_n for every mode in ``modes`` and in ``pairs``."""
        return np.eye(self.n_modes)[[n - 1 for n in self.direction_modes]]

    def describe(self) -> dict:
        d = asdict(self)
        d["x0"] = None if self.x0 is None else [float(v) for v in np.asarray(self.x0)]
        d["phi"] = self.phi.kind
        d["pairs"] = [list(p) for p in self.pairs]
        return d


@dataclass
class ProbeResult:
    config: ProbeConfig
    du: np.ndarray          # (n_t, len(modes)) estimates of Du(t).e_n
    du_se: np.ndarray
    d2u: np.ndarray         # (n_t, len(pairs)) estimates of D^2u(t).(e_n, e_m)
    d2u_se: np.ndarray
    energy_ratio: float     # max over paths, directions, steps of |eta| / (|h| bound)
    n_samples: int


def mesh_noise(plan: SeedPlan, basis: Basis, delta: float, substep, samples, replica: int = 0,
               out=None) -> np.ndarray:
    """Stochastic convolution over one ``(size, stream, counter)`` substep of a probe mesh.

    Both streams are keyed by the probe step ``delta``; the graded stream has
    its own key, so its counters never collide with the uniform ones.
    """
    size, stream, counter = substep
    z = plan.normals(stream, delta, counter, samples, basis.n_modes, replica, out=out)
    return StepNoise(basis, size).convolution(z, out=z)


def _engine(cfg: ProbeConfig, dirs, du_idx, hi, ki, progress=None):
    basis = cfg.basis
    psi_dt = cfg.psi_dt
    x0 = cfg.initial()
    plan = SeedPlan(cfg.seed)
    mesh = cfg.mesh()
    n_grade = sum(1 for m in mesh if m[1] == GRADED)
    # time k delta is reached after substep index n_grade + k - 1 (k >= 1), or k - 1 ungraded
    first = n_grade if n_grade else 1
    record = {first + steps_for(t, cfg.dt) - 2: i for i, t in enumerate(cfg.t_grid)}
    n_t = len(cfg.t_grid)
    S = basis.sine_matrix
    inv = 1.0 / (basis.n_modes + 1.0)
    # everything is carried on the collocation grid; P maps grid values through e^{hA}
    P = {h: basis.weighted_sine(semigroup_factors(h, basis)) @ S for h in {m[0] for m in mesh}}
    rate = math.exp(DT_MAX) - basis.eigenvalues[0]
    n_pairs = len(hi)

    def block(start, stop):
        samples = np.arange(start, stop, dtype=np.int64)
        b = samples.shape[0]
        xg = np.repeat((x0 @ S)[None, :], b, axis=0)
        eg = np.broadcast_to(dirs @ S, (b,) + dirs.shape).copy()
        zg = np.zeros((b, n_pairs, basis.n_modes)) if n_pairs else None
        du = np.empty((b, n_t, len(du_idx)))
        d2 = np.empty((b, n_t, n_pairs))
        z = np.empty((b, basis.n_modes))
        worst = 0.0
        t = 0.0
        for j, (h, stream, counter) in enumerate(mesh):
            growth, curv = _reaction_terms(xg, h, psi_dt, cfg.drift)
            if zg is not None:
                zg *= growth[:, None, :]
                zg += curv[:, None, :] * eg[:, hi, :] * eg[:, ki, :]
                zg = zg @ P[h]
            eg *= growth[:, None, :]
            eg = eg @ P[h]
            if cfg.drift != "linear":
                xg = nl.phi(h, xg) if psi_dt == h else xg + h * nl.psi(psi_dt, xg)
            xg = xg @ P[h]
            if cfg.noise:
                xg += mesh_noise(plan, basis, cfg.dt, (h, stream, counter), samples, cfg.replica,
                                 z) @ S
            t += h
            norm = math.sqrt(float(np.max(np.sum(eg * eg, axis=-1))) * inv)
            worst = max(worst, norm / math.exp(rate * t))
            i = record.get(j)
            if i is not None:
                x = xg @ S * inv
                eta = eg @ S * inv
                du[:, i, :] = cfg.phi.grad(x, eta[:, du_idx, :])
                if zg is not None:
                    d2[:, i, :] = (cfg.phi.grad(x, zg @ S * inv)
                                   + cfg.phi.second(x, eta[:, hi, :], eta[:, ki, :]))
        return du, d2, worst

    m_du = ArrayMoments((n_t, len(du_idx)))
    m_d2 = ArrayMoments((n_t, n_pairs))
    worst = 0.0
    for du, d2, w in map_blocks(block, cfg.M, cfg.block_size, cfg.threads, progress):
        m_du.add(du)
        m_d2.add(d2)
        worst = max(worst, w)
    return m_du, m_d2, worst


def run_probe(cfg: ProbeConfig, progress=None) -> ProbeResult:
    """Monte Carlo estimates of Du(t).e_n and D^2u(t).(e_n, e_m) on the probe grid."""
    col = {n: i for i, n in enumerate(cfg.direction_modes)}
    du_idx = [col[n] for n in cfg.modes]
    hi = [col[a] for a, _ in cfg.pairs]
    ki = [col[b] for _, b in cfg.pairs]
    m_du, m_d2, worst = _engine(cfg, cfg.directions(), du_idx, hi, ki, progress)
    return ProbeResult(cfg, m_du.mean, m_du.std_error, m_d2.mean, m_d2.std_error, worst,
                       m_du.count)


class DerivativeEstimate(NamedTuple):
    value: float
    std_error: float
    params: dict


def _single_config(t, x, phi, M, n_modes, options):
    if M < 100:
        raise ValueError(f"derivative estimates need M >= 100 samples, got {M}")
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=np.float64)
    options = {"block_size": 1000, **options}
    return ProbeConfig(t_grid=(t,), modes=(), pairs=(), second=False,
                       n_modes=n_modes or x.shape[-1], M=M, x0=x, phi=phi, **options)


def estimate_Du(t: float, x, h, phi: TestFunction, M: int, n_modes: int | None = None,
                **options) -> DerivativeEstimate:
    """Monte Carlo estimate of Du(t, x).h = E[Dphi(X(t)).eta^h(t)].

    ``options`` are :class:`ProbeConfig` fields (dt, drift_dt, seed, noise, ...).
    """
    cfg = _single_config(t, x, phi, M, n_modes, options)
    dirs = as_field(h, cfg.basis)[None, :]
    m_du, _, _ = _engine(cfg, dirs, [0], [], [])
    return DerivativeEstimate(float(m_du.mean[0, 0]), float(m_du.std_error[0, 0]),
                              {"t": t, "M": M, "dt": cfg.dt})


def estimate_D2u(t: float, x, h, k, phi: TestFunction, M: int, n_modes: int | None = None,
                 **options) -> DerivativeEstimate:
    """Monte Carlo estimate of D^2u(t, x).(h, k)."""
    cfg = _single_config(t, x, phi, M, n_modes, options)
    dirs = np.stack([as_field(h, cfg.basis), as_field(k, cfg.basis)])
    _, m_d2, _ = _engine(cfg, dirs, [], [0], [1])
    return DerivativeEstimate(float(m_d2.mean[0, 0]), float(m_d2.std_error[0, 0]),
                              {"t": t, "M": M, "dt": cfg.dt})


# ---------------------------------------------------------------------------
# scans


SCAN_COLUMNS = ("t", "n", "estimate", "std_error", "scaled")
SCAN2_COLUMNS = ("t", "n", "m", "estimate", "std_error", "scaled")


@dataclass
class ScanTable:
    columns: tuple
    rows: list                    # tuples in column order
    exponents: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def csv_text(self) -> str:
        lines = [",".join(self.columns)] + [",".join(fmt(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        Path(path).write_text(self.csv_text())

    def envelope(self, axis: str) -> tuple[np.ndarray, np.ndarray]:
        """Max of ``scaled`` per time (axis "t") or per mode shell max(n, m) (axis "mode")."""
        scaled = self.column("scaled")
        if axis == "t":
            key = self.column("t")
        elif "m" in self.columns:
            key = np.maximum(self.column("n"), self.column("m"))
        else:
            key = self.column("n")
        keys = np.unique(key)
        return keys, np.array([scaled[key == k].max() for k in keys])

    def growth_check(self, factor: float = 2.0) -> dict:
        """No growth trend: along the mode shells and along time, the envelope value
        on the last grid point stays within ``factor`` times the envelope median.

        Envelopes (not raw entries) are compared because entries that vanish by
        symmetry would otherwise pull the median down to the noise floor.
        """
        out = {"sup": float(np.max(self.column("scaled"))), "passed": True}
        for axis in ("mode", "t"):
            _, env = self.envelope(axis)
            med = float(np.median(env))
            out[f"{axis}_median"] = med
            out[f"{axis}_last"] = float(env[-1])
            out["passed"] &= bool(env[-1] <= factor * med)
        return out


def _check_alpha(alpha):
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")


def _check_beta_gamma(beta, gamma):
    if beta < 0 or gamma < 0 or beta + gamma >= 1.0:
        raise ValueError(f"need beta, gamma >= 0 and beta + gamma < 1, got {beta}, {gamma}")


def regularization_table(result: ProbeResult, alpha: float) -> ScanTable:
    """Rows (t, n, Du(t).e_n, se, |Du(t).e_n| lambda_n^alpha t^alpha)."""
    _check_alpha(alpha)
    lam = result.config.basis.eigenvalues
    rows = []
    for i, t in enumerate(result.config.t_grid):
        for j, n in enumerate(result.config.modes):
            est = result.du[i, j]
            rows.append((t, n, est, result.du_se[i, j], abs(est) * lam[n - 1] ** alpha * t ** alpha))
    return ScanTable(SCAN_COLUMNS, rows, {"alpha": alpha})


def second_derivative_table(result: ProbeResult, beta: float, gamma: float) -> ScanTable:
    """Rows (t, n, m, D^2u(t).(e_n, e_m), se, |.| lambda_n^beta lambda_m^gamma t^(beta+gamma))."""
    _check_beta_gamma(beta, gamma)
    lam = result.config.basis.eigenvalues
    rows = []
    for i, t in enumerate(result.config.t_grid):
        for j, (n, m) in enumerate(result.config.pairs):
            est = result.d2u[i, j]
            scaled = abs(est) * lam[n - 1] ** beta * lam[m - 1] ** gamma * t ** (beta + gamma)
            rows.append((t, n, m, est, result.d2u_se[i, j], scaled))
    return ScanTable(SCAN2_COLUMNS, rows, {"beta": beta, "gamma": gamma})


def scan_regularization(t_list, modes, alpha: float, x, phi: TestFunction, M: int,
                        **options) -> ScanTable:
    """|Du(t, x).e_n| lambda_n^alpha t^alpha over the (t, n) grid."""
    _check_alpha(alpha)
    x = np.asarray(x, dtype=np.float64)
    cfg = ProbeConfig(t_grid=tuple(t_list), modes=tuple(modes), second=False, pairs=(),
                      n_modes=x.shape[-1], M=M, x0=x, phi=phi, **options)
    return regularization_table(run_probe(cfg), alpha)


def scan_second_derivative(t_list, pairs, beta: float, gamma: float, x, phi: TestFunction, M: int,
                           **options) -> ScanTable:
    """|D^2u(t, x).(e_n, e_m)| lambda_n^beta lambda_m^gamma t^(beta+gamma) over (t, pair)."""
    _check_beta_gamma(beta, gamma)
    x = np.asarray(x, dtype=np.float64)
    pairs = tuple(pairs)
    modes = tuple(sorted({p for pr in pairs for p in pr}))
    cfg = ProbeConfig(t_grid=tuple(t_list), modes=modes, pairs=pairs, n_modes=x.shape[-1], M=M,
                      x0=x, phi=phi, **options)
    return second_derivative_table(run_probe(cfg), beta, gamma)


# ---------------------------------------------------------------------------
# Malliavin derivative of the semi-implicit scheme


def semi_implicit_path(T: float, dt: float, basis: Basis, x0=None, seed: int = 0, sample: int = 0,
                       drift: str = "allen_cahn", noise: bool = True) -> np.ndarray:
    """States X_0..X_N of the semi-implicit scheme for one sample, shape (N+1, n_modes)."""
    _check_drift(drift)
    n = steps_for(T, dt)
    x = default_initial(basis) if x0 is None else as_field(x0, basis)
    plan = SeedPlan(seed)
    sn = StepNoise(basis, dt)
    res = resolvent_factors(dt, basis)
    path = np.empty((n + 1, basis.n_modes))
    path[0] = x
    for k in range(n):
        y = x if drift == "linear" else to_spectral(nl.phi(dt, to_physical(x, basis)), basis)
        if noise:
            z0 = plan.normals(PRIMARY, dt, k, sample, basis.n_modes)[0]
            z1 = plan.normals(SECONDARY, dt, k, sample, basis.n_modes)[0]
            y = y + sn.white(z0, z1)
        x = res * y
        path[k + 1] = x
    return path


def last_step_before(s: float, dt: float) -> int:
    """Largest k with k dt <= s (grid times within 1e-12 relative count as equal)."""
    tol = 1e-12 * max(abs(s), dt)
    k = int(math.floor(s / dt))
    while (k + 1) * dt <= s + tol:
        k += 1
    while k > 0 and k * dt > s + tol:
        k -= 1
    return k


def malliavin_derivative(path: np.ndarray, s: float, h, dt: float, basis: Basis,
                         drift: str = "allen_cahn") -> np.ndarray:
    """D_s^h X_k for k = 0..N along a recorded semi-implicit path.

    Zero while k dt <= s; S_dt h at the first grid time after s; afterwards
    D_s^h X_{k+1} = S_dt Phi_dt'(X_k) D_s^h X_k (pointwise on the grid).
    """
    n = path.shape[0] - 1
    T = n * dt
    if not 0.0 <= s <= T:
        raise ValueError(f"s={s} outside [0, T={T}]")
    h = np.asarray(h, dtype=np.float64)
    res = resolvent_factors(dt, basis)
    out = np.zeros((n + 1,) + h.shape)
    l = last_step_before(s, dt)
    if l >= n:
        return out
    d = res * h
    out[l + 1] = d
    for k in range(l + 1, n):
        if drift == "linear":
            d = res * d
        else:
            fp = nl.phi_prime(dt, to_physical(path[k], basis))
            d = res * to_spectral(fp * to_physical(d, basis), basis)
        out[k + 1] = d
    return out


@dataclass
class MalliavinReport:
    T: float
    dt: float
    s_values: tuple
    ratios: np.ndarray          # (n_s, N+1): max over probes of |D_s^h X_k| / |h|
    max_ratio: float
    bound: float                # e^T
    zero_before_s: bool         # exactly 0 for every k with k dt <= s
    passed: bool

    def csv_text(self) -> str:
        lines = ["s,k,t,max_ratio"]
        for i, s in enumerate(self.s_values):
            for k in range(self.ratios.shape[1]):
                lines.append(",".join(fmt(v) for v in (s, k, k * self.dt, self.ratios[i, k])))
        return "\n".join(lines) + "\n"


def malliavin_norm_check(T: float = 1.0, dt: float = 2.0 ** -6, s_values=None, n_probes: int = 20,
                         n_modes: int = 128, x0=None, seed: int = 0, sample: int = 0,
                         drift: str = "allen_cahn", noise: bool = True) -> MalliavinReport:
    """max over random probes h of |D_s^h X_k|_H / |h|_H along one semi-implicit path."""
    basis = Basis(n_modes)
    if s_values is None:
        s_values = tuple(T * (2 * i + 1) / 10.0 for i in range(5))
    s_values = tuple(float(s) for s in s_values)
    for s in s_values:
        if not 0.0 <= s <= T:
            raise ValueError(f"s={s} outside [0, T={T}]")
    path = semi_implicit_path(T, dt, basis, x0, seed, sample, drift, noise)
    probes = SeedPlan(seed).normals(PROBE, dt, 0, np.arange(n_probes), n_modes)
    norms = np.sqrt(np.sum(probes * probes, axis=-1))
    n = path.shape[0] - 1
    ratios = np.zeros((len(s_values), n + 1))
    zero_ok = True
    for i, s in enumerate(s_values):
        d = malliavin_derivative(path, s, probes, dt, basis, drift)
        r = np.sqrt(np.sum(d * d, axis=-1)) / norms[None, :]
        ratios[i] = np.max(r, axis=1)
        l = last_step_before(s, dt)
        zero_ok &= bool(np.all(d[: l + 1] == 0.0))
    bound = math.exp(T)
    max_ratio = float(ratios.max())
    return MalliavinReport(T, dt, s_values, ratios, max_ratio, bound, zero_ok,
                           bool(max_ratio <= bound and zero_ok))
