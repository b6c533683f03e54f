import math
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sacsplit.harness import (ArrayMoments, ErrorRow, ErrorTable, InsufficientData, Moments,
                              StudyConfig, TestFunction, ValidationError, fit_rate, fmt, map_blocks,
                              moment_table, refinement_study, run_study, strong_error, strong_table,
                              weak_error, weak_table, write_manifest)
from sacsplit.schemes import EXPONENTIAL, SEMI_IMPLICIT
from sacsplit.spectral import Basis

# ---------------------------------------------------------------------------
# rate fits


def synthetic(dts, values, se=None):
    se = [0.0] * len(dts) if se is None else se
    return ErrorTable([ErrorRow(d, v, s, 100, 0) for d, v, s in zip(dts, values, se)])


DTS = [2.0 ** -k for k in range(4, 10)]


def test_fit_exact_half():
    rep = fit_rate(synthetic(DTS, [d ** 0.5 for d in DTS]))
    assert rep.slope == pytest.approx(0.5, abs=1e-12)
    assert rep.residual < 1e-12


def test_fit_slope_and_intercept():
    rep = fit_rate(synthetic(DTS, [3 * d ** 0.25 for d in DTS]))
    assert rep.slope == pytest.approx(0.25, abs=1e-12)
    assert rep.intercept == pytest.approx(math.log2(3), abs=1e-12)


def test_fit_excludes_insignificant_rows():
    vals = [d ** 0.5 for d in DTS]
    se = [v / 10 for v in vals]
    vals[-1] = 5.0  # wild but insignificant
    se[-1] = 2.0
    rep = fit_rate(synthetic(DTS, vals, se))
    assert DTS[-1] not in rep.used
    assert rep.slope == pytest.approx(0.5, abs=1e-12)


def test_fit_uses_magnitude_of_signed_errors():
    rep = fit_rate(synthetic(DTS, [-(d ** 0.5) for d in DTS]))
    assert rep.slope == pytest.approx(0.5, abs=1e-12)


def test_fit_refuses_below_three_rows():
    with pytest.raises(InsufficientData):
        fit_rate(synthetic(DTS[:2], [0.1, 0.05]))
    with pytest.raises(InsufficientData):
        fit_rate(synthetic(DTS, [1e-3] * 6, [1e-3] * 6))


@given(st.floats(0.05, 1.5), st.floats(-5, 5))
def test_fit_recovers_power_laws(p, c):
    rep = fit_rate(synthetic(DTS, [2.0 ** c * d ** p for d in DTS]))
    assert rep.slope == pytest.approx(p, abs=1e-9)
    assert rep.intercept == pytest.approx(c, abs=1e-8)


def test_table_rows_sorted_and_csv_roundtrip(tmp_path):
    t = synthetic(DTS[::-1], [1 / 3 * d for d in DTS[::-1]], [1e-17 * math.pi] * 6)
    assert list(t.dts) == sorted(DTS, reverse=True)
    path = tmp_path / "t.csv"
    t.to_csv(path)
    back = ErrorTable.from_csv(path)
    assert back.rows == t.rows
    assert path.read_text().splitlines()[0] == "dt,estimate,std_error,n_samples,n_flagged"


def test_fmt_round_trips():
    for x in (1 / 3, math.pi * 1e-300, 2.0 ** -52, -0.1):
        assert float(fmt(x)) == x
    assert fmt(True) == "1" and fmt(np.int64(7)) == "7"


# ---------------------------------------------------------------------------
# reductions


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200), st.integers(1, 50))
def test_moments_merge_matches_numpy(values, block):
    m = Moments()
    for a in range(0, len(values), block):
        m.add(values[a:a + block])
    x = np.array(values)
    assert m.count == len(values)
    assert m.mean == pytest.approx(x.mean(), abs=1e-9)
    assert m.variance == pytest.approx(x.var(ddof=1), rel=1e-9, abs=1e-9)


def test_moments_mask_and_array():
    x = np.arange(10.0)
    m = Moments().add(x, x % 2 == 0)
    assert m.count == 5 and m.mean == 4.0
    a = ArrayMoments((2,))
    a.add(np.column_stack([x[:4], -x[:4]])).add(np.column_stack([x[4:], -x[4:]]))
    np.testing.assert_allclose(a.mean, [4.5, -4.5])
    np.testing.assert_allclose(a.std_error, x.std(ddof=1) / math.sqrt(10))


def test_map_blocks_preserves_order():
    def fn(a, b):
        time.sleep(0.001 * ((7 * a) % 5))
        return (a, b, threading.get_ident())

    out = list(map_blocks(fn, 103, 10, threads=4))
    assert [(a, b) for a, b, _ in out] == [(a, min(a + 10, 103)) for a in range(0, 103, 10)]


# ---------------------------------------------------------------------------
# test functions


@pytest.mark.parametrize("kind", TestFunction.KINDS)
@given(seed=st.integers(0, 2 ** 32))
def test_functional_derivatives_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=6)
    f = TestFunction(kind, v)
    x, h, k = rng.normal(size=(3, 6)) * 0.5
    eps = 1e-5
    fd = (f.value(x + eps * h) - f.value(x - eps * h)) / (2 * eps)
    assert f.grad(x, h) == pytest.approx(fd, abs=1e-7)
    fd2 = (f.grad(x + eps * k, h) - f.grad(x - eps * k, h)) / (2 * eps)
    assert f.second(x, h, k) == pytest.approx(fd2, abs=1e-7)
    assert abs(f.grad(x, h)) <= f.lipschitz(6) * np.linalg.norm(h) + 1e-12


def test_functional_direction_axis():
    f = TestFunction("gaussian")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    h = rng.normal(size=(4, 3, 5))
    g = f.grad(x, h)
    for j in range(3):
        np.testing.assert_allclose(g[:, j], f.grad(x, h[:, j]))


# ---------------------------------------------------------------------------
# studies


SMALL = dict(ladder=(2.0 ** -2, 2.0 ** -3, 2.0 ** -4), dt_ref=2.0 ** -6, n_modes=16, M=4000,
             block_size=500)


def test_reference_row_is_exactly_zero():
    cfg = StudyConfig(kinds=(EXPONENTIAL,), ladder=(2.0 ** -3, 2.0 ** -5, 2.0 ** -6), dt_ref=2.0 ** -6,
                      n_modes=16, M=200, block_size=100)
    res = run_study(cfg)
    assert weak_table(res, EXPONENTIAL).row(2.0 ** -6).estimate == 0.0
    assert strong_table(res, EXPONENTIAL).row(2.0 ** -6).estimate == 0.0


def test_linear_exponential_weak_error_vanishes():
    # the exponential scheme is exact in law for the linear equation
    for coupled in (True, False):
        cfg = StudyConfig(kinds=(EXPONENTIAL,), drift="linear", coupled=coupled, **SMALL)
        t = weak_table(run_study(cfg), EXPONENTIAL)
        assert np.all(np.abs(t.estimates) <= 3 * t.std_errors + 1e-13), coupled


def _linear_si_discrepancy(lam, h, N, T):
    r = 1.0 / (1.0 + lam * h)
    var = 0.0
    for k in range(N):
        a = r ** (N - k)
        lin = math.exp(-lam * (T - (k + 1) * h)) * -math.expm1(-lam * h) / lam
        sq = math.exp(-2 * lam * (T - (k + 1) * h)) * -math.expm1(-2 * lam * h) / (2 * lam)
        var += a * a * h - 2 * a * lin + sq
    return var


def test_linear_strong_error_closed_form():
    cfg = StudyConfig(kinds=(EXPONENTIAL, SEMI_IMPLICIT), drift="linear", x0=np.zeros(16), **SMALL)
    res = run_study(cfg)
    np.testing.assert_allclose(strong_table(res, EXPONENTIAL).estimates, 0.0, atol=1e-12)
    t = strong_table(res, SEMI_IMPLICIT)
    lam = Basis(16).eigenvalues
    for row in t.rows:
        n = round(1.0 / row.dt)
        ref = math.sqrt(sum(_linear_si_discrepancy(l, row.dt, n, 1.0) for l in lam))
        assert abs(row.estimate - ref) < 3 * row.std_error, (row, ref)


def test_coupled_estimator_unbiased():
    kw = dict(SMALL, M=8000)
    a = weak_table(run_study(StudyConfig(kinds=(SEMI_IMPLICIT,), **kw)), SEMI_IMPLICIT)
    b = weak_table(run_study(StudyConfig(kinds=(SEMI_IMPLICIT,), coupled=False, **kw)), SEMI_IMPLICIT)
    assert np.all(b.std_errors > a.std_errors)
    assert np.all(np.abs(a.estimates - b.estimates) < 3 * np.hypot(a.std_errors, b.std_errors))


def test_study_reproducible_across_threads():
    base = dict(SMALL, M=1000, block_size=100)
    a = run_study(StudyConfig(kinds=(EXPONENTIAL, SEMI_IMPLICIT), threads=1, **base))
    b = run_study(StudyConfig(kinds=(EXPONENTIAL, SEMI_IMPLICIT), threads=3, **base))
    for kind in (EXPONENTIAL, SEMI_IMPLICIT):
        assert weak_table(a, kind).csv_text() == weak_table(b, kind).csv_text()
        assert strong_table(a, kind).csv_text() == strong_table(b, kind).csv_text()
        assert moment_table(a, kind).csv_text() == moment_table(b, kind).csv_text()


def test_snapshots_equal_shorter_run():
    base = dict(SMALL, M=1000, block_size=250)
    full = run_study(StudyConfig(snapshots=(500,), **base))
    short = run_study(StudyConfig(**dict(base, M=500)))
    assert weak_table(full.snapshots[500], EXPONENTIAL).csv_text().splitlines()[1:] == \
        weak_table(short, EXPONENTIAL).csv_text().splitlines()[1:]


def test_config_validation():
    with pytest.raises(ValueError):
        StudyConfig(ladder=(0.3,), dt_ref=0.1)
    with pytest.raises(ValueError):
        StudyConfig(ladder=(2.0,), dt_ref=0.5, T=2.0)
    with pytest.raises(ValueError):
        StudyConfig(kinds=("euler",))
    with pytest.raises(ValueError):
        weak_error(EXPONENTIAL, M=999, **{k: v for k, v in SMALL.items() if k != "M"})
    with pytest.raises(ValueError):
        strong_error(EXPONENTIAL, M=10, **{k: v for k, v in SMALL.items() if k != "M"})


def test_flag_rate_validation():
    cfg = StudyConfig(drift="linear", x0=np.full(4, 1e7), n_modes=4, ladder=(2.0 ** -6,),
                      dt_ref=2.0 ** -6, T=2.0 ** -6, M=10, block_size=10)
    res = run_study(cfg)
    assert res.flag_rate() == 1.0
    with pytest.raises(ValidationError):
        res.validate()


def test_manifest(tmp_path):
    cfg = StudyConfig(**SMALL)
    write_manifest(tmp_path / "m.json", cfg.describe(), 5, 1.5, extra=np.float64(2.0))
    import json
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["seed"] == 5 and doc["config"]["n_modes"] == 16 and doc["extra"] == 2.0
    assert "version" in doc and doc["wall_time_s"] == 1.5


# ---------------------------------------------------------------------------
# refinement


def test_refinement_M_halves_std_error():
    base = StudyConfig(**dict(SMALL, n_modes=8))
    rep = refinement_study("M", [1000, 2000, 4000], base)
    assert rep.stable, rep.se_ratios
    assert all(0.6 <= r <= 0.85 for r in rep.se_ratios)


def test_refinement_n_modes_stable():
    base = StudyConfig(**dict(SMALL, M=4000))
    rep = refinement_study("n_modes", [16, 32, 64], base, kind=SEMI_IMPLICIT)
    assert rep.stable, rep.changes


def test_refinement_dt_ref_stable():
    base = StudyConfig(**dict(SMALL, M=4000))
    rep = refinement_study("dt_ref", [2.0 ** -5, 2.0 ** -6, 2.0 ** -7], base, kind=SEMI_IMPLICIT)
    assert rep.stable, rep.changes


def test_refinement_validation():
    with pytest.raises(ValueError):
        refinement_study("T", [1, 2, 3], StudyConfig(**SMALL))
    with pytest.raises(ValueError):
        refinement_study("M", [1000, 2000], StudyConfig(**SMALL))


def test_fit_ignores_roundoff_rows():
    # differences between bit-near-identical paths are not an error signal
    with pytest.raises(InsufficientData):
        fit_rate(synthetic(DTS, [1e-17 * d for d in DTS], [1e-19] * 6))
