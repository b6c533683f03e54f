"""Weak and strong error tables over a ladder of time steps, and log-log rate fits.

Every level of the ladder is driven by exact aggregates of one fine noise path
(the reference resolution ``dt_ref``), so the weak error is estimated by the
difference estimator

    mean_i [ phi(X_N^{dt}(omega_i)) - phi(X_ref(omega_i)) ]

whose variance is far smaller than that of two independent means. Samples are
processed in fixed-size blocks; per-block moments are merged in block order,
so every table is bit-identical for any thread count.
"""
from __future__ import annotations

import json
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .noise import SeedPlan
from .schemes import (DRIFTS, DT_MAX, EXPONENTIAL, KINDS, Level, default_initial, simulate_coupled,
                      steps_for)
from .spectral import Basis, as_field, to_physical

FLAG_LIMIT = 1e-3  # more than 0.1% diverged samples fails validation
DEFAULT_LADDER = tuple(2.0 ** -k for k in range(4, 10))
DEFAULT_DT_REF = 2.0 ** -12
DEFAULT_BLOCK = 1000
SIGNIFICANCE = 3.0
ROUNDOFF_FLOOR = 1e-12  # |estimate| at or below this is floating-point noise, never fitted


class InsufficientData(ValueError):
    """Fewer than three significant rows for a rate fit."""


class ValidationError(RuntimeError):
    """A run finished but violates a hard requirement (flag rate, bound)."""


def fmt(x) -> str:
    """Round-trip float formatting used by every table (17 significant digits)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# test functions


class TestFunction:
    """Bounded-C^2 functional phi on coefficient space with Dphi.h and D^2phi.(h, k).

    kinds: ``cosine`` cos(<x, v>), ``gaussian`` exp(-|x|_H^2), ``linear`` <x, v>.
    ``v`` defaults to e_1 in whatever dimension the argument has.
    """

    __test__ = False  # not a pytest class
    KINDS = ("cosine", "gaussian", "linear")

    def __init__(self, kind: str = "cosine", v=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown test function {kind!r}; expected one of {self.KINDS}")
        self.kind = kind
        self.v = None if v is None else np.asarray(v, dtype=np.float64)

    def __repr__(self):
        return f"TestFunction({self.kind!r})" if self.v is None else f"TestFunction({self.kind!r}, v)"

    def direction(self, n_modes: int) -> np.ndarray:
        if self.v is None:
            v = np.zeros(n_modes)
            v[0] = 1.0
            return v
        if self.v.shape != (n_modes,):
            raise ValueError(f"direction has {self.v.shape[0]} modes, state has {n_modes}")
        return self.v

    def lipschitz(self, n_modes: int) -> float:
        """sup |Dphi| over the state space."""
        if self.kind == "gaussian":
            return math.sqrt(2.0) * math.exp(-0.5)
        return float(np.linalg.norm(self.direction(n_modes)))

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "gaussian":
            return np.exp(-np.sum(x * x, axis=-1))
        a = x @ self.direction(x.shape[-1])
        return np.cos(a) if self.kind == "cosine" else a

    @staticmethod
    def _lift(q, x, h):
        # scalar-per-state q broadcast against directions with an extra axis
        return q[..., None] if h.ndim == x.ndim + 1 else q

    def grad(self, x, h):
        """Dphi(x).h; ``h`` is shaped like ``x`` or carries one extra direction axis."""
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        if self.kind == "gaussian":
            xe = x[..., None, :] if h.ndim == x.ndim + 1 else x
            return -2.0 * self._lift(self.value(x), x, h) * np.sum(xe * h, axis=-1)
        v = self.direction(x.shape[-1])
        if self.kind == "linear":
            return h @ v
        return -self._lift(np.sin(x @ v), x, h) * (h @ v)

    def second(self, x, h, k):
        """D^2phi(x).(h, k); ``h`` and ``k`` shaped alike (optionally with a direction axis)."""
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        k = np.asarray(k, dtype=np.float64)
        if self.kind == "linear":
            return np.zeros(np.broadcast_shapes(h.shape, k.shape)[:-1])
        if self.kind == "gaussian":
            xe = x[..., None, :] if h.ndim == x.ndim + 1 else x
            xh = np.sum(xe * h, axis=-1)
            xk = np.sum(xe * k, axis=-1)
            return self._lift(self.value(x), x, h) * (4.0 * xh * xk - 2.0 * np.sum(h * k, axis=-1))
        v = self.direction(x.shape[-1])
        return -self._lift(np.cos(x @ v), x, h) * (h @ v) * (k @ v)


# ---------------------------------------------------------------------------
# deterministic reductions


class Moments:
    """Count, mean and centred second moment, merged block by block (Chan et al.)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, values, mask=None):
        values = np.asarray(values, dtype=np.float64)
        if mask is not None:
            values = values[np.asarray(mask, dtype=bool)]
        n = values.shape[0]
        if n == 0:
            return self
        mean = float(np.mean(values, axis=0))
        m2 = float(np.sum(np.square(values - mean), axis=0))
        total = self.count + n
        delta = mean - self.mean
        self.mean += delta * n / total
        self.m2 += m2 + delta * delta * self.count * n / total
        self.count = total
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else float("nan")

    def copy(self) -> "Moments":
        m = Moments()
        m.count, m.mean, m.m2 = self.count, self.mean, self.m2
        return m


class ArrayMoments:
    """:class:`Moments` over a whole array of statistics per sample (leading axis = samples)."""

    def __init__(self, shape):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def add(self, values):
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[0]
        if n == 0:
            return self
        mean = np.mean(values, axis=0)
        m2 = np.sum(np.square(values - mean), axis=0)
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta * delta * (self.count * n / total)
        self.count = total
        return self

    @property
    def std_error(self) -> np.ndarray:
        if self.count < 2:
            return np.full_like(self.mean, np.nan)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def sample_blocks(n_samples: int, block_size: int):
    return [(a, min(a + block_size, n_samples)) for a in range(0, n_samples, block_size)]


def map_blocks(fn, n_samples: int, block_size: int = DEFAULT_BLOCK, threads: int = 1,
               progress=None):
    """Yield ``fn(start, stop)`` for consecutive sample blocks, always in block order.

    Block boundaries depend only on ``block_size``; ``threads`` only changes how
    many blocks are in flight, never what each block computes.
    """
    bounds = sample_blocks(n_samples, block_size)
    total = len(bounds)
    if threads <= 1:
        for i, b in enumerate(bounds):
            out = fn(*b)
            if progress:
                progress(i + 1, total)
            yield out
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        pending = deque()
        it = iter(bounds)
        done = 0
        for b in it:
            pending.append(ex.submit(fn, *b))
            if len(pending) >= 2 * threads:
                break
        while pending:
            out = pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(ex.submit(fn, *nxt))
            done += 1
            if progress:
                progress(done, total)
            yield out


# ---------------------------------------------------------------------------
# coupled ladder study


def as_plan(plan) -> SeedPlan:
    return plan if isinstance(plan, SeedPlan) else SeedPlan(int(plan))


@dataclass(frozen=True)
class StudyConfig:
    kinds: tuple = (EXPONENTIAL,)
    ladder: tuple = DEFAULT_LADDER
    dt_ref: float = DEFAULT_DT_REF
    T: float = 1.0
    n_modes: int = 128
    M: int = 100_000
    seed: int = 0
    x0: np.ndarray | None = None
    drift: str = "allen_cahn"
    noise: bool = True
    functionals: tuple = (TestFunction("cosine"),)
    coupled: bool = True
    block_size: int = DEFAULT_BLOCK
    threads: int = 1
    snapshots: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "ladder", tuple(sorted(map(float, self.ladder), reverse=True)))
        object.__setattr__(self, "functionals", tuple(self.functionals))
        object.__setattr__(self, "snapshots", tuple(int(s) for s in self.snapshots))
        self.validate()

    @property
    def basis(self) -> Basis:
        return Basis(self.n_modes)

    def initial(self) -> np.ndarray:
        return default_initial(self.basis) if self.x0 is None else as_field(self.x0, self.basis)

    def factor(self, dt: float) -> int:
        return nesting_factor(dt, self.dt_ref)

    def validate(self):
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown scheme {k!r}; expected one of {KINDS}")
        if self.drift not in DRIFTS:
            raise ValueError(f"unknown drift {self.drift!r}; expected one of {DRIFTS}")
        if not self.ladder:
            raise ValueError("empty time-step ladder")
        if not self.functionals:
            raise ValueError("at least one test function is required")
        n_ref = steps_for(self.T, self.dt_ref)
        for dt in self.ladder:
            if dt > DT_MAX:
                raise ValueError(f"dt={dt} exceeds the admissible maximum {DT_MAX}")
            m = nesting_factor(dt, self.dt_ref)
            if n_ref % m:
                raise ValueError(f"dt={dt} does not divide T={self.T}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"M must be an integer >= 2, got {self.M}")
        if self.block_size < 1 or self.threads < 1:
            raise ValueError("block_size and threads must be positive")
        for s in self.snapshots:
            if s % self.block_size or not 0 < s <= self.M:
                raise ValueError(f"snapshot {s} must be a multiple of block_size within M")

    def describe(self) -> dict:
        d = asdict(self)
        d["x0"] = None if self.x0 is None else [float(v) for v in np.asarray(self.x0)]
        d["functionals"] = [f.kind for f in self.functionals]
        d["ladder"] = list(self.ladder)
        d["kinds"] = list(self.kinds)
        d["snapshots"] = list(self.snapshots)
        return d


def nesting_factor(dt: float, dt_ref: float) -> int:
    """m with dt = m dt_ref; raises when the ladder does not nest."""
    if not dt > 0 or not dt_ref > 0:
        raise ValueError("time steps must be positive")
    m = round(dt / dt_ref)
    if m < 1 or abs(m * dt_ref - dt) > 1e-9 * dt:
        raise ValueError(f"dt={dt} is not an integer multiple of dt_ref={dt_ref}")
    return m


@dataclass
class LevelStats:
    kind: str
    dt: float
    weak: list            # Moments of phi(X) - phi(X_ref) per test function (coupled only)
    values: list          # Moments of phi(X) per test function
    sq: Moments           # |X - X_ref|_H^2 (coupled only)
    sup4: Moments         # sup-norm(X)^4
    n_flagged: int = 0
    n_total: int = 0

    def copy(self) -> "LevelStats":
        return LevelStats(self.kind, self.dt, [m.copy() for m in self.weak],
                          [m.copy() for m in self.values], self.sq.copy(), self.sup4.copy(),
                          self.n_flagged, self.n_total)


@dataclass
class StudyResult:
    config: StudyConfig
    levels: dict          # (kind, dt) -> LevelStats
    reference: LevelStats
    wall_time: float = 0.0
    snapshots: dict = field(default_factory=dict)  # n_samples -> StudyResult

    def level(self, kind: str, dt: float) -> LevelStats:
        for (k, d), st in self.levels.items():
            if k == kind and abs(d - dt) <= 1e-12 * dt:
                return st
        raise KeyError((kind, dt))

    def flag_rate(self) -> float:
        rates = [st.n_flagged / st.n_total for st in [self.reference, *self.levels.values()]
                 if st.n_total]
        return max(rates, default=0.0)

    def validate(self, limit: float = FLAG_LIMIT):
        rate = self.flag_rate()
        if rate > limit:
            raise ValidationError(f"{rate:.3%} of samples diverged (limit {limit:.1%})")


def _new_stats(kind, dt, n_phi):
    return LevelStats(kind, dt, [Moments() for _ in range(n_phi)], [Moments() for _ in range(n_phi)],
                      Moments(), Moments())


def _grid_sup(fields, basis):
    return np.max(np.abs(to_physical(fields, basis)), axis=-1)


def run_study(cfg: StudyConfig, progress=None) -> StudyResult:
    """Simulate every (scheme, dt) level of ``cfg`` and the reference on shared noise."""
    t0 = time.perf_counter()
    basis = cfg.basis
    x0 = cfg.initial()
    plan = SeedPlan(cfg.seed)
    n_phi = len(cfg.functionals)
    ref_level = Level(EXPONENTIAL, 1)
    keyed = {(k, dt): Level(k, cfg.factor(dt)) for k in cfg.kinds for dt in cfg.ladder}

    def block(start, stop):
        samples = np.arange(start, stop, dtype=np.int64)
        if cfg.coupled:
            out = simulate_coupled([ref_level, *keyed.values()], basis, cfg.dt_ref, cfg.T, x0, plan,
                                   samples, cfg.drift, noise=cfg.noise)
            ref = out[ref_level]
        else:
            out = simulate_coupled(list(keyed.values()), basis, cfg.dt_ref, cfg.T, x0, plan,
                                   samples, cfg.drift, replica=0, noise=cfg.noise)
            ref = simulate_coupled([ref_level], basis, cfg.dt_ref, cfg.T, x0, plan, samples,
                                   cfg.drift, replica=1, noise=cfg.noise)[ref_level]
        res = {"ref": _block_stats(ref.fields, ref.flagged, cfg, basis)}
        for key, lev in keyed.items():
            term = out[lev]
            st = _block_stats(term.fields, term.flagged, cfg, basis)
            if cfg.coupled:
                st["sq"] = np.sum(np.square(term.fields - ref.fields), axis=-1)
            res[key] = st
        return res

    reference = _new_stats(EXPONENTIAL, cfg.dt_ref, n_phi)
    levels = {key: _new_stats(key[0], key[1], n_phi) for key in keyed}
    snaps = {}
    seen = 0
    for res in map_blocks(block, cfg.M, cfg.block_size, cfg.threads, progress):
        ref = res["ref"]
        _merge(reference, ref, None)
        for key, st in levels.items():
            _merge(st, res[key], ref if cfg.coupled else None)
        seen += ref["flag"].shape[0]
        if seen in cfg.snapshots:
            snaps[seen] = StudyResult(replace(cfg, M=seen, snapshots=()),
                                      {k: v.copy() for k, v in levels.items()}, reference.copy())
    result = StudyResult(cfg, levels, reference, time.perf_counter() - t0, snaps)
    for s in snaps.values():
        s.wall_time = result.wall_time
    return result


def _block_stats(fields, flagged, cfg, basis):
    st = {"flag": np.asarray(flagged, dtype=bool)}
    st["phi"] = [f.value(fields) for f in cfg.functionals]
    st["sup"] = _grid_sup(fields, basis)
    return st


def _merge(stats: LevelStats, st: dict, ref: dict | None):
    ok = ~st["flag"]
    stats.n_flagged += int(np.count_nonzero(st["flag"]))
    stats.n_total += st["flag"].shape[0]
    for i, vals in enumerate(st["phi"]):
        stats.values[i].add(vals, ok)
    stats.sup4.add(np.power(st["sup"], 4), ok)
    if ref is not None:
        both = ok & ~ref["flag"]
        for i, vals in enumerate(st["phi"]):
            stats.weak[i].add(vals - ref["phi"][i], both)
        stats.sq.add(st["sq"], both)


# ---------------------------------------------------------------------------
# tables and fits


@dataclass(frozen=True)
class ErrorRow:
    dt: float
    estimate: float
    std_error: float
    n_samples: int
    n_flagged: int


COLUMNS = ("dt", "estimate", "std_error", "n_samples", "n_flagged")


@dataclass
class ErrorTable:
    rows: list
    quantity: str = "weak"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.dt, reverse=True)

    @property
    def dts(self) -> np.ndarray:
        return np.array([r.dt for r in self.rows])

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r.estimate for r in self.rows])

    @property
    def std_errors(self) -> np.ndarray:
        return np.array([r.std_error for r in self.rows])

    def row(self, dt: float) -> ErrorRow:
        for r in self.rows:
            if abs(r.dt - dt) <= 1e-12 * dt:
                return r
        raise KeyError(dt)

    def csv_text(self) -> str:
        lines = [",".join(COLUMNS)]
        lines += [",".join(fmt(getattr(r, c)) for c in COLUMNS) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        Path(path).write_text(self.csv_text())

    @classmethod
    def from_csv(cls, path, quantity="weak") -> "ErrorTable":
        lines = Path(path).read_text().strip().splitlines()
        rows = []
        for line in lines[1:]:
            dt, est, se, n, nf = line.split(",")
            rows.append(ErrorRow(float(dt), float(est), float(se), int(n), int(nf)))
        return cls(rows, quantity)


def weak_table(result: StudyResult, kind: str, functional: int = 0) -> ErrorTable:
    """Weak errors E[phi(X_N)] - E[phi(X_ref)] for one scheme of a finished study."""
    cfg = result.config
    ref = result.reference
    rows = []
    for dt in cfg.ladder:
        st = result.level(kind, dt)
        if cfg.coupled:
            m = st.weak[functional]
            est, se, n = m.mean, m.std_error, m.count
        else:
            a, b = st.values[functional], ref.values[functional]
            est = a.mean - b.mean
            se = math.hypot(a.std_error, b.std_error)
            n = min(a.count, b.count)
        rows.append(ErrorRow(dt, est, se, n, st.n_flagged))
    return ErrorTable(rows, "weak", _meta(result, kind, cfg.functionals[functional].kind))


def strong_table(result: StudyResult, kind: str) -> ErrorTable:
    """Root-mean-square distance |X_N - X_ref|_H on coupled paths."""
    cfg = result.config
    if not cfg.coupled:
        raise ValueError("strong errors need coupled noise")
    rows = []
    for dt in cfg.ladder:
        st = result.level(kind, dt)
        mean = max(st.sq.mean, 0.0)
        est = math.sqrt(mean)
        # delta method for the square root of a mean
        se = st.sq.std_error / (2.0 * est) if est > 0 else 0.0
        rows.append(ErrorRow(dt, est, se, st.sq.count, st.n_flagged))
    return ErrorTable(rows, "strong", _meta(result, kind, None))


def moment_table(result: StudyResult, kind: str) -> ErrorTable:
    """E[sup-norm(X_N)^4] per time step (grid sup norm)."""
    rows = []
    for dt in result.config.ladder:
        st = result.level(kind, dt)
        rows.append(ErrorRow(dt, st.sup4.mean, st.sup4.std_error, st.sup4.count, st.n_flagged))
    return ErrorTable(rows, "moment", _meta(result, kind, None))


def _meta(result, kind, phi):
    cfg = result.config
    return {"scheme": kind, "phi": phi, "T": cfg.T, "n_modes": cfg.n_modes, "seed": cfg.seed,
            "dt_ref": cfg.dt_ref, "M": cfg.M, "coupled": cfg.coupled, "drift": cfg.drift}


@dataclass(frozen=True)
class RateReport:
    slope: float
    intercept: float
    residual: float
    used: tuple           # time steps entering the fit
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "residual": self.residual,
                "used": list(self.used), "n_used": len(self.used), **self.metadata}


def fit_rate(table: ErrorTable, significance: float = SIGNIFICANCE) -> RateReport:
    """OLS of log2|estimate| on log2 dt over rows with |estimate| > significance * std_error.

    Weak errors carry a sign, so the magnitude is fitted; residual is the largest
    absolute deviation of a used point from the fitted line. Rows at or below
    ``ROUNDOFF_FLOOR`` are round-off between identical paths and never count.
    """
    used = [r for r in table.rows
            if np.isfinite(r.estimate) and abs(r.estimate) > ROUNDOFF_FLOOR
            and abs(r.estimate) > significance * (r.std_error if np.isfinite(r.std_error) else np.inf)]
    if len(used) < 3:
        raise InsufficientData(
            f"only {len(used)} of {len(table.rows)} rows have |estimate| > {significance:g} std_error; "
            "need at least 3 to fit a rate")
    x = np.log2([r.dt for r in used])
    y = np.log2([abs(r.estimate) for r in used])
    (slope, intercept), *_ = np.linalg.lstsq(np.column_stack([x, np.ones_like(x)]), y, rcond=None)
    residual = float(np.max(np.abs(y - (slope * x + intercept))))
    return RateReport(float(slope), float(intercept), residual, tuple(r.dt for r in used),
                      dict(table.metadata, quantity=table.quantity))


def weak_error(kind: str, phi: TestFunction | None = None, ladder=DEFAULT_LADDER,
               dt_ref: float = DEFAULT_DT_REF, T: float = 1.0, M: int = 100_000, plan=0,
               **options) -> ErrorTable:
    """Coupled weak-error table for one scheme (see :class:`StudyConfig` for options)."""
    phi = phi or TestFunction("cosine")
    cfg = StudyConfig(kinds=(kind,), ladder=ladder, dt_ref=dt_ref, T=T, M=M,
                      seed=as_plan(plan).master_seed, functionals=(phi,), **options)
    if cfg.M < 1000:
        raise ValueError(f"weak_error needs M >= 1000 samples, got {cfg.M}")
    return weak_table(run_study(cfg), kind)


def strong_error(kind: str, ladder=DEFAULT_LADDER, dt_ref: float = DEFAULT_DT_REF, T: float = 1.0,
                 M: int = 10_000, plan=0, **options) -> ErrorTable:
    """Coupled strong-error table for one scheme."""
    cfg = StudyConfig(kinds=(kind,), ladder=ladder, dt_ref=dt_ref, T=T, M=M,
                      seed=as_plan(plan).master_seed, **options)
    if cfg.M < 1000:
        raise ValueError(f"strong_error needs M >= 1000 samples, got {cfg.M}")
    return strong_table(run_study(cfg), kind)


# ---------------------------------------------------------------------------
# refinement of the approximation parameters


REFINABLE = ("n_modes", "dt_ref", "M")


@dataclass
class RefinementReport:
    param: str
    values: list
    tables: list
    changes: list         # per consecutive pair: max |d estimate| / combined std error
    se_ratios: list       # per consecutive pair: median std_error ratio
    stable: bool
    notes: list = field(default_factory=list)


def refinement_study(param: str, values, base: StudyConfig, statistic: str = "weak",
                     kind: str = EXPONENTIAL, functional: int = 0,
                     tolerance: float = 2.0) -> RefinementReport:
    """Recompute an error table for each value of ``param`` and flag unstable trends.

    For ``n_modes``/``dt_ref``, consecutive tables must agree within ``tolerance``
    combined standard errors on every row. For ``M`` (doubling), the standard
    errors must shrink by a factor in [0.6, 0.85].
    """
    if param not in REFINABLE:
        raise ValueError(f"cannot refine {param!r}; choose one of {REFINABLE}")
    values = list(values)
    if len(values) < 3:
        raise ValueError("a refinement ladder needs at least 3 values")
    tables = []
    for v in values:
        cfg = replace(base, kinds=(kind,), **{param: v}, snapshots=())
        res = run_study(cfg)
        tables.append(weak_table(res, kind, functional) if statistic == "weak"
                      else strong_table(res, kind))
    changes, ratios, notes = [], [], []
    for a, b in zip(tables, tables[1:]):
        combined = np.hypot(a.std_errors, b.std_errors)
        changes.append(float(np.max(np.abs(a.estimates - b.estimates) / combined)))
        ratios.append(float(np.median(b.std_errors / a.std_errors)))
    if param == "M":
        stable = all(0.6 <= r <= 0.85 for r in ratios)
        if not stable:
            notes.append("std_error does not follow the 1/sqrt(M) law")
    else:
        stable = all(c < tolerance for c in changes)
        if not stable:
            notes.append(f"estimates move by more than {tolerance} combined std errors")
    return RefinementReport(param, values, tables, changes, ratios, stable, notes)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, config: dict, seed: int, wall_time: float, **extra):
    doc = {"config": config, "seed": int(seed), "version": __version__,
           "wall_time_s": wall_time, **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, TestFunction):
        return o.kind
    raise TypeError(f"cannot serialise {type(o).__name__}")
