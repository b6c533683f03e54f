"""Command-line front end: ``sacsplit {simulate,weak,strong,probe}``.

Exit codes: 0 success, 2 configuration error, 3 too few significant rows for a
rate fit, 4 validation failure (flag rate above 0.1% or a violated bound).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import KEYS, ConfigError, RunConfig, load_file, read_pairs, resolve
from .harness import (ErrorTable, InsufficientData, StudyConfig, ValidationError, fit_rate, fmt,
                      map_blocks, moment_table, run_study, strong_table, weak_table,
                      write_manifest)
from .kolmogorov import (ENERGY_SLACK, ProbeConfig, malliavin_norm_check, regularization_table,
                         run_probe, second_derivative_table)
from .noise import SeedPlan
from .schemes import SchemeSpec, simulate_terminal
from .spectral import Basis

EXIT_OK, EXIT_CONFIG, EXIT_INSUFFICIENT, EXIT_VALIDATION = 0, 2, 3, 4
MIN_LADDER = 3


class Progress:
    """Block counter on stderr, only when it is a terminal."""

    def __init__(self, label):
        self.label = label
        self.live = sys.stderr.isatty()

    def __call__(self, done, total):
        if self.live:
            end = "\n" if done == total else ""
            print(f"\r[{self.label}] block {done}/{total}", end=end, file=sys.stderr, flush=True)


def _write(path: Path, text: str, outputs: list):
    path.write_text(text)
    outputs.append(path.name)


def cmd_simulate(rc: RunConfig, out: Path, outputs: list) -> int:
    spec = SchemeSpec(rc["scheme"][0], rc["dt"], rc["T"], Basis(rc["n_modes"]), rc.initial(),
                      rc["drift"], rc["noise"])
    plan = SeedPlan(rc["seed"])
    xi = spec.basis.grid
    S = spec.basis.sine_matrix

    def block(a, b):
        return simulate_terminal(spec, plan, np.arange(a, b))

    lines = ["sample,n,coefficient,xi,value,flagged"]
    sample = 0
    n_flagged = 0
    for term in map_blocks(block, rc["M"], rc["block_size"], rc["threads"], Progress("simulate")):
        values = term.fields @ S
        for x, v, f in zip(term.fields, values, term.flagged):
            n_flagged += int(f)
            for j in range(x.shape[0]):
                lines.append(",".join([str(sample), str(j + 1), fmt(x[j]), fmt(xi[j]), fmt(v[j]),
                                       str(int(f))]))
            sample += 1
    _write(out / "terminal.csv", "\n".join(lines) + "\n", outputs)
    print(f"simulate {spec.kind}: {rc['M']} sample(s), {n_flagged} flagged -> {out / 'terminal.csv'}")
    return EXIT_OK


def _study(rc: RunConfig, functionals) -> StudyConfig:
    ladder = rc["ladder"]
    if len(set(ladder)) < MIN_LADDER:
        raise InsufficientData(f"ladder has {len(set(ladder))} step(s); a rate fit needs at least "
                               f"{MIN_LADDER}")
    try:
        return StudyConfig(kinds=rc["scheme"], ladder=ladder, dt_ref=rc["dt_ref"], T=rc["T"],
                           n_modes=rc["n_modes"], M=rc["M"], seed=rc["seed"], x0=rc.initial(),
                           drift=rc["drift"], noise=rc["noise"], functionals=functionals,
                           coupled=rc["coupled"], block_size=rc["block_size"],
                           threads=rc["threads"])
    except ValueError as e:
        key = "ladder" if "dt" in str(e) else "config"
        raise ConfigError(key, str(e)) from None


def _fit_and_write(table: ErrorTable, stem: str, rc, out, outputs, label) -> bool:
    _write(out / f"{stem}.csv", table.csv_text(), outputs)
    try:
        rep = fit_rate(table, rc["significance"])
    except InsufficientData as e:
        doc = {"error": str(e), **table.metadata}
        _write(out / f"{stem}_rate.json", json.dumps(doc, indent=2, sort_keys=True) + "\n", outputs)
        print(f"{label}: insufficient data: {e}")
        return False
    _write(out / f"{stem}_rate.json", json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n",
           outputs)
    print(f"{label}: slope {rep.slope:.4f} from {len(rep.used)} rows (residual {rep.residual:.3g})")
    return True


def _convergence(rc: RunConfig, out: Path, outputs: list, quantity: str) -> int:
    functionals = rc.functionals() if quantity == "weak" else rc.functionals()[:1]
    cfg = _study(rc, functionals)
    result = run_study(cfg, Progress(quantity))
    ok = True
    for kind in cfg.kinds:
        if quantity == "weak":
            for i, phi in enumerate(functionals):
                stem = f"weak_{kind}" if len(functionals) == 1 else f"weak_{kind}_{phi.kind}"
                ok &= _fit_and_write(weak_table(result, kind, i), stem, rc, out, outputs,
                                     f"weak {kind} {phi.kind}")
        else:
            ok &= _fit_and_write(strong_table(result, kind), f"strong_{kind}", rc, out, outputs,
                                 f"strong {kind}")
            _write(out / f"moment_{kind}.csv", moment_table(result, kind).csv_text(), outputs)
    try:
        result.validate()
    except ValidationError as e:
        print(f"validation failed: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK if ok else EXIT_INSUFFICIENT


def cmd_probe(rc: RunConfig, out: Path, outputs: list) -> int:
    try:
        cfg = ProbeConfig(t_grid=rc["probe_t"], modes=rc["probe_modes"], pairs=rc["probe_pairs"],
                          second=rc["second"], dt=rc["probe_dt"], drift_dt=rc["drift_dt"],
                          grading=rc["grading"], n_modes=rc["n_modes"], M=rc["M"],
                          seed=rc["seed"], x0=rc.initial(), drift=rc["drift"], noise=rc["noise"],
                          phi=rc.functionals()[0], block_size=rc["block_size"],
                          threads=rc["threads"])
    except ValueError as e:
        raise ConfigError("probe", str(e)) from None
    if rc["beta"] + rc["gamma"] >= 1.0:
        raise ConfigError("beta", "beta + gamma must be below 1")
    res = run_probe(cfg, Progress("probe"))
    report = {"energy_ratio": res.energy_ratio,
              "energy_passed": bool(res.energy_ratio <= 1.0 + ENERGY_SLACK)}
    du = regularization_table(res, rc["alpha"])
    _write(out / "du_scan.csv", du.csv_text(), outputs)
    report["du_scan"] = du.growth_check()
    if cfg.pairs:
        d2 = second_derivative_table(res, rc["beta"], rc["gamma"])
        _write(out / "d2u_scan.csv", d2.csv_text(), outputs)
        report["d2u_scan"] = d2.growth_check()
    try:
        mal = malliavin_norm_check(rc["malliavin_T"], rc["malliavin_dt"], rc["malliavin_s"],
                                   rc["malliavin_probes"], rc["n_modes"], rc.initial(),
                                   rc["seed"], rc["malliavin_sample"], rc["drift"], rc["noise"])
    except ValueError as e:
        raise ConfigError("malliavin_s", str(e)) from None
    _write(out / "malliavin.csv", mal.csv_text(), outputs)
    report["malliavin"] = {"max_ratio": mal.max_ratio, "bound": mal.bound,
                           "zero_before_s": mal.zero_before_s, "passed": mal.passed}
    _write(out / "probe_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n", outputs)
    print(f"probe: energy ratio {res.energy_ratio:.6f} ({'pass' if report['energy_passed'] else 'FAIL'}); "
          f"Malliavin max ratio {mal.max_ratio:.6f} <= e^T = {mal.bound:.6f} "
          f"({'pass' if mal.passed else 'FAIL'})")
    print(f"probe: sup |Du| scan {report['du_scan']['sup']:.6g}"
          + (f", sup |D2u| scan {report['d2u_scan']['sup']:.6g}" if cfg.pairs else ""))
    return EXIT_OK if report["energy_passed"] and mal.passed else EXIT_VALIDATION


COMMANDS = {"simulate": cmd_simulate,
            "weak": lambda rc, out, o: _convergence(rc, out, o, "weak"),
            "strong": lambda rc, out, o: _convergence(rc, out, o, "strong"),
            "probe": cmd_probe}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k.name:17s} {k.doc}" for k in KEYS.values())
    p = argparse.ArgumentParser(
        prog="sacsplit", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Splitting schemes for the stochastic Allen-Cahn equation.",
        epilog=f"config keys (file lines 'key = value' or --set key=value):\n{keys}")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=str, help="master seed (unsigned 64-bit)")
    p.add_argument("--threads", type=str, help="worker threads")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override a config key (repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        raw = load_file(args.config) if args.config else {}
        raw.update(read_pairs(args.set, "--set"))
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.threads is not None:
            raw["threads"] = args.threads
        base = Path(args.config).parent if args.config else Path(".")
        rc = resolve(args.command, raw, base)
        rc.initial()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs = []
        code = COMMANDS[args.command](rc, out, outputs)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientData as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    write_manifest(out / "manifest.json", rc.describe(), rc["seed"], time.perf_counter() - t0,
                   command=args.command, outputs=outputs, exit_code=code)
    return code


if __name__ == "__main__":
    sys.exit(main())
