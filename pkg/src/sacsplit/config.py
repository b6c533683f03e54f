"""Flat ``key = value`` run configuration for the command-line front end.

One assignment per line, ``#`` starts a comment. Lists are comma separated;
``2^-4..2^-9`` expands to consecutive powers of two and ``1..16`` to an integer
range. Command-line overrides (``--set key=value``, ``--seed``, ``--threads``)
replace file values.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import DEFAULT_BLOCK, DEFAULT_DT_REF, DEFAULT_LADDER, SIGNIFICANCE, TestFunction
from .kolmogorov import DEFAULT_MODES, DEFAULT_PROBE_DT, DEFAULT_T_GRID, GRADING_LEVELS
from .schemes import DEFAULT_AMPLITUDE, DRIFTS, KINDS
from .spectral import Basis, sine_profile

COMMANDS = ("simulate", "weak", "strong", "probe")


class ConfigError(ValueError):
    """Invalid or missing configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


_POW2 = re.compile(r"^2\s*(?:\^|\*\*)\s*\(?\s*(-?\d+)\s*\)?$")


def parse_number(text: str) -> float:
    """Float, or a power of two written ``2^-k`` / ``2**-k``."""
    s = text.strip()
    m = _POW2.match(s)
    if m:
        return 2.0 ** int(m.group(1))
    return float(s)


def _positive(text):
    v = parse_number(text)
    if not (v > 0 and np.isfinite(v)):
        raise ValueError("must be a positive number")
    return v


def _positive_int(text):
    v = parse_number(text)
    if v != int(v) or v < 1:
        raise ValueError("must be a positive integer")
    return int(v)


def _nonneg_int(text):
    v = parse_number(text)
    if v != int(v) or v < 0:
        raise ValueError("must be a non-negative integer")
    return int(v)


def _seed(text):
    v = int(text.strip(), 0)
    if not 0 <= v < 2 ** 64:
        raise ValueError("must fit in an unsigned 64-bit integer")
    return v


def _fraction(text):
    v = parse_number(text)
    if not 0 <= v < 1:
        raise ValueError("must lie in [0, 1)")
    return v


def _bool(text):
    s = text.strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ValueError("must be on/off")


def _choice(options):
    def parse(text):
        s = text.strip()
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _expand(item):
    if ".." not in item:
        return [item]
    a, b = (p.strip() for p in item.split("..", 1))
    ma, mb = _POW2.match(a), _POW2.match(b)
    if ma and mb:
        ka, kb = int(ma.group(1)), int(mb.group(1))
        step = 1 if kb >= ka else -1
        return [f"2^{k}" for k in range(ka, kb + step, step)]
    ia, ib = int(a), int(b)
    step = 1 if ib >= ia else -1
    return [str(k) for k in range(ia, ib + step, step)]


def _list(item_parser):
    def parse(text):
        items = [p.strip() for p in text.split(",") if p.strip()]
        out = [item_parser(x) for it in items for x in _expand(it)]
        if not out:
            raise ValueError("empty list")
        return tuple(out)
    return parse


def _optional(parser):
    def parse(text):
        return None if text.strip().lower() in ("none", "") else parser(text)
    return parse


def _initial(text):
    s = text.strip()
    if s == "zero":
        return ("zero", 0.0)
    if s.startswith("sine:"):
        return ("sine", float(s[5:]))
    if s.startswith("file:"):
        return ("file", s[5:])
    raise ValueError("must be zero, sine:AMPLITUDE or file:PATH")


def _pairs(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        a, _, b = item.partition(":")
        out.append((_positive_int(a), _positive_int(b)))
    if not out:
        raise ValueError("empty pair list")
    return tuple(out)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    doc: str


KEYS = {k.name: k for k in [
    Key("scheme", _list(_choice(KINDS)), None, "scheme(s): exponential, semi_implicit"),
    Key("T", _positive, 1.0, "final time"),
    Key("dt", _positive, None, "time step (simulate)"),
    Key("ladder", _list(_positive), DEFAULT_LADDER, "time steps of the convergence study"),
    Key("dt_ref", _positive, DEFAULT_DT_REF, "reference (fine) time step"),
    Key("n_modes", _positive_int, 128, "number of sine modes N"),
    Key("M", _positive_int, None, "samples (default: simulate 1, weak 1e5, strong/probe 1e4)"),
    Key("seed", _seed, 0, "master seed"),
    Key("threads", _positive_int, 1, "worker threads"),
    Key("block_size", _positive_int, None, "samples per block (default 1000, probe 100)"),
    Key("x0", _initial, ("sine", DEFAULT_AMPLITUDE), "initial condition"),
    Key("noise", _bool, True, "stochastic forcing on/off"),
    Key("drift", _choice(DRIFTS), "allen_cahn", "allen_cahn or linear (Psi = 0)"),
    Key("phi", _list(_choice(TestFunction.KINDS)), ("cosine",), "test function(s)"),
    Key("phi_mode", _positive_int, 1, "direction v = e_n of the cosine/linear functional"),
    Key("coupled", _bool, True, "drive all levels with one noise path"),
    Key("significance", _positive, SIGNIFICANCE, "rows used in fits: |estimate| > k std_error"),
    Key("probe_t", _list(_positive), DEFAULT_T_GRID, "probe times"),
    Key("probe_modes", _list(_positive_int), DEFAULT_MODES, "probe directions e_n"),
    Key("probe_pairs", _optional(_pairs), None, "pairs n:m for D^2u (default all n <= m)"),
    Key("probe_dt", _positive, DEFAULT_PROBE_DT, "probe step"),
    Key("drift_dt", _optional(_positive), None, "regularization step of Psi (default probe_dt)"),
    Key("grading", _nonneg_int, GRADING_LEVELS, "graded substeps on the first probe step"),
    Key("second", _bool, True, "estimate D^2u"),
    Key("alpha", _fraction, 0.45, "exponent of the Du scan"),
    Key("beta", _fraction, 0.45, "first exponent of the D^2u scan"),
    Key("gamma", _fraction, 0.45, "second exponent of the D^2u scan"),
    Key("malliavin_T", _positive, 1.0, "horizon of the Malliavin check"),
    Key("malliavin_dt", _positive, 2.0 ** -6, "step of the Malliavin check"),
    Key("malliavin_probes", _positive_int, 20, "random probe directions"),
    Key("malliavin_s", _list(lambda t: float(parse_number(t))), (0.1, 0.3, 0.5, 0.7, 0.9),
        "times s of D_s"),
    Key("malliavin_sample", _nonneg_int, 0, "sample index of the checked path"),
]}

REQUIRED = {"simulate": ("scheme", "T", "dt"), "weak": ("scheme",), "strong": ("scheme",),
            "probe": ()}
DEFAULT_M = {"simulate": 1, "weak": 100_000, "strong": 10_000, "probe": 10_000}


def read_pairs(lines, source="config") -> dict:
    """``key = value`` lines to a dict of raw strings (later lines win)."""
    raw = {}
    for i, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0], f"{source}:{i}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        raw[key] = value
    return raw


def load_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    return read_pairs(text.splitlines(), str(path))


@dataclass
class RunConfig:
    command: str
    values: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.values[key]

    def initial(self) -> np.ndarray:
        kind, arg = self.values["x0"]
        basis = Basis(self.values["n_modes"])
        if kind == "zero":
            return np.zeros(basis.n_modes)
        if kind == "sine":
            return sine_profile(arg, basis)
        path = Path(arg)
        if not path.is_absolute():
            path = self.base_dir / path
        try:
            data = np.array(path.read_text().replace(",", " ").split(), dtype=np.float64)
        except (OSError, ValueError) as e:
            raise ConfigError("x0", f"cannot read coefficients from {path}: {e}") from None
        if data.shape != (basis.n_modes,) or not np.all(np.isfinite(data)):
            raise ConfigError("x0", f"{path} must hold {basis.n_modes} finite coefficients")
        return data

    def functionals(self) -> tuple:
        v = np.zeros(self.values["n_modes"])
        n = self.values["phi_mode"]
        if n > v.shape[0]:
            raise ConfigError("phi_mode", f"mode {n} exceeds n_modes={v.shape[0]}")
        v[n - 1] = 1.0
        return tuple(TestFunction(k, None if n == 1 else v) for k in self.values["phi"])

    def describe(self) -> dict:
        d = dict(self.values)
        d["command"] = self.command
        kind, arg = d["x0"]
        d["x0"] = "zero" if kind == "zero" else f"{kind}:{arg}"
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d


def resolve(command: str, raw: dict, base_dir=".") -> RunConfig:
    """Parse raw strings, apply defaults and check the keys ``command`` requires."""
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}")
    for key in raw:
        if key not in KEYS:
            raise ConfigError(key, "unknown key")
    for key in REQUIRED[command]:
        if key not in raw:
            raise ConfigError(key, f"missing (required by {command})")
    values = {}
    for name, k in KEYS.items():
        if name in raw:
            try:
                values[name] = k.parse(raw[name])
            except (ValueError, TypeError) as e:
                raise ConfigError(name, f"bad value {raw[name]!r}: {e}") from None
        else:
            values[name] = k.default
    if values["M"] is None:
        values["M"] = DEFAULT_M[command]
    if values["block_size"] is None:
        values["block_size"] = 100 if command == "probe" else DEFAULT_BLOCK
    if command == "simulate" and len(values["scheme"]) != 1:
        raise ConfigError("scheme", "simulate takes a single scheme")
    return RunConfig(command, values, Path(base_dir))
