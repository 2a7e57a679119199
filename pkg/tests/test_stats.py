from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats as sps

from fabkit.errors import PreconditionError
from fabkit.plugins.stats.analysis import (
    EnsembleResult,
    bootstrap_means,
    curve_distance,
    ensemble_analyze,
    format_curve,
    gaussian_check,
    parse_curve,
)

from oracles import exact_bootstrap_quantiles, ks_statistic, python_bootstrap_ci

# Frozen after cross-checking against the exact enumeration and the
# pure-Python bootstrap below (seed 12345, 1000 resamples).
GOLDEN_123 = {0.95: (1.0, 3.0), 0.5: (5 / 3, 7 / 3)}


def test_zero_variance():
    for n in (2, 5, 50):
        assert tuple(ensemble_analyze([5.0] * n, 1000, 0.95, seed=3)) == (5.0, 0.0, 5.0, 5.0)


def test_mean_and_sample_sigma():
    s = ensemble_analyze([1.0, 2.0, 3.0, 4.0], 200, 0.9, seed=1)
    assert s.mean == 2.5
    assert s.sigma == pytest.approx(np.std([1, 2, 3, 4], ddof=1))


@pytest.mark.parametrize("confidence", [0.95, 0.5])
def test_123_golden_and_oracles(confidence):
    s = ensemble_analyze([1, 2, 3], 1000, confidence, seed=12345)
    assert s.mean == 2.0
    assert (s.ci_lo, s.ci_hi) == pytest.approx(GOLDEN_123[confidence], abs=1e-12)
    lo, hi = exact_bootstrap_quantiles([1, 2, 3], confidence)
    assert (s.ci_lo, s.ci_hi) == pytest.approx((float(lo), float(hi)), abs=1e-12)
    plo, phi = python_bootstrap_ci([1.0, 2.0, 3.0], 1000, confidence, seed=12345)
    # means live on a 1/3 grid; the two generators may differ by at most one step
    assert abs(plo - s.ci_lo) <= 1 / 3 + 1e-9 and abs(phi - s.ci_hi) <= 1 / 3 + 1e-9


def test_exact_oracle_sanity():
    assert exact_bootstrap_quantiles([1, 2, 3], 0.5) == (Fraction(5, 3), Fraction(7, 3))


def test_dual_implementation_agreement_on_gaussian():
    x = list(np.random.default_rng(11).normal(size=40))
    s = ensemble_analyze(x, 4000, 0.9, seed=5)
    plo, phi = python_bootstrap_ci(x, 4000, 0.9, seed=5)
    se = np.std(x, ddof=1) / math.sqrt(len(x))
    assert abs(plo - s.ci_lo) < 0.15 * se and abs(phi - s.ci_hi) < 0.15 * se


def test_gaussian_ci_width_matches_standard_error():
    x = np.random.default_rng(2024).standard_normal(50)
    s = ensemble_analyze(x, 1000, 0.95, seed=7)
    expected = 2 * 1.96 / math.sqrt(50)
    assert abs((s.ci_hi - s.ci_lo) - expected) <= 0.2 * expected


def test_confidence_monotone():
    x = np.random.default_rng(9).normal(size=30)
    widths = []
    for c in (0.8, 0.9, 0.95, 0.99):
        s = ensemble_analyze(x, 1000, c, seed=4)
        widths.append(s.ci_hi - s.ci_lo)
        assert s.ci_lo <= s.mean <= s.ci_hi
    assert widths == sorted(widths)


@pytest.mark.parametrize("c", [2.0, 0.5, -3.0, 1e3])
def test_scale_equivariance(c):
    x = np.random.default_rng(1).normal(size=25)
    a = ensemble_analyze(x, 500, 0.95, seed=8)
    b = ensemble_analyze(x * c, 500, 0.95, seed=8)
    lo, hi = sorted((a.ci_lo * c, a.ci_hi * c))
    assert b.mean == pytest.approx(a.mean * c, rel=1e-12)
    assert b.sigma == pytest.approx(a.sigma * abs(c), rel=1e-12)
    assert (b.ci_lo, b.ci_hi) == pytest.approx((lo, hi), rel=1e-12)


def test_power_of_two_scaling_is_bit_exact():
    x = np.random.default_rng(1).normal(size=25)
    a, b = ensemble_analyze(x, 500, 0.95, seed=8), ensemble_analyze(x * 4.0, 500, 0.95, seed=8)
    assert tuple(v * 4.0 for v in a) == tuple(b)


def test_resample_indices_depend_only_on_seed():
    a = bootstrap_means(np.arange(5.0), 50, 3)
    b = bootstrap_means(np.arange(5.0) * 10, 50, 3)
    assert np.array_equal(a * 10, b)


@pytest.mark.parametrize("kwargs", [
    dict(values=[1.0]), dict(values=[1.0, float("nan")]), dict(values=[1.0, 2.0], confidence=1.0),
    dict(values=[1.0, 2.0], n_resamples=50),
])
def test_bootstrap_preconditions(kwargs):
    with pytest.raises(PreconditionError):
        ensemble_analyze(**kwargs)


def test_ensemble_result_validation():
    assert EnsembleResult((1, 2)).replica_ids == ("1", "2")
    with pytest.raises(PreconditionError):
        EnsembleResult((1, 2), ("a",))
    with pytest.raises(PreconditionError):
        EnsembleResult((1, float("inf")))


def test_gaussian_check_symmetry_and_degenerate():
    fit = gaussian_check([-4, -3, -2, -1, 0, 1, 2, 3, 4])
    assert fit.mu == 0.0
    const = gaussian_check([2.5] * 10)
    assert const.degenerate and const.statistic == 1.0
    with pytest.raises(PreconditionError):
        gaussian_check([-1, 0, 1])


def test_gaussian_check_large_sample_and_scipy_oracle():
    x = np.random.default_rng(5).standard_normal(1000)
    fit = gaussian_check(x)
    assert fit.statistic < 0.05
    ref = sps.kstest(x, "norm", args=(fit.mu, fit.sigma)).statistic
    assert fit.statistic == pytest.approx(ref, abs=1e-12)
    assert fit.statistic == pytest.approx(ks_statistic(x, lambda v: sps.norm.cdf(v, fit.mu, fit.sigma)), abs=1e-12)


def test_gaussian_check_flags_non_gaussian():
    x = np.random.default_rng(5).exponential(size=1000)
    assert gaussian_check(x).statistic > 0.05


def test_curve_io_and_distances():
    text = "# r g(r)\n0.0 1.0\n\n0.5 2.0\n1.0 -1.0\n"
    cur = parse_curve(text)
    tgt = parse_curve(format_curve([0.0, 0.5, 1.0], [0.0, 2.0, 1.0]))
    mad, msd = curve_distance(cur, tgt)
    assert mad == pytest.approx(1.0)
    assert msd == pytest.approx((1 + 0 + 4) / 3)
    assert msd <= mad * np.max(np.abs(cur.y - tgt.y))
    assert curve_distance(cur, cur) == (0.0, 0.0)


def test_curve_grid_mismatch_and_bad_input():
    a = parse_curve("0 1\n1 1\n")
    with pytest.raises(PreconditionError):
        curve_distance(a, parse_curve("0 1\n2 1\n"))
    with pytest.raises(PreconditionError):
        curve_distance(a, parse_curve("0 1\n1 1\n2 1\n"))
    for bad in ("", "# only comments\n", "1\n", "a b\n"):
        with pytest.raises(PreconditionError):
            parse_curve(bad)
