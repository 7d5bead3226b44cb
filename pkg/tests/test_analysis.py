"""Unit tests for the stability-analysis helpers."""

import json
import math

import numpy as np
import pytest

from periscore.analysis import (
    CurveSeries,
    DegenerateRow,
    cosmax_extremum_interval,
    diag_gradient_fixed_m,
    extreme_diag_gradient,
    extremum_vs_m_curve,
    filter_gain,
    gradient_curve,
    prenormed_jacobian,
    prenormed_scores,
    row_normalize,
    row_normalize_jacobian,
    saturation_fraction,
    sin2max_extremum_location,
    sinmax_constant_expected_gradient,
    sinmax_constant_expected_score,
    softmax_extreme_gradient,
    submersion_curve,
)
from periscore.scorefn import (
    COS_MAX,
    SIN2_MAX,
    SIN_MAX_CONSTANT,
    SIN_SOFTMAX,
    SIREN_MAX,
    SOFTMAX,
    DenominatorNearZero,
    PoleProximity,
    scores,
)


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


# -- fixed-M diagonal gradient -----------------------------------------


def test_diag_gradient_matches_direct_formula():
    xs = np.array([-1.0, 0.0, 2.0])
    got = diag_gradient_fixed_m(SOFTMAX, 1.0, xs)
    want = np.exp(xs) / (1.0 + np.exp(xs)) ** 2
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_diag_gradient_guard_points_become_nan():
    xs = np.array([0.0, math.pi / 2, 1.0])
    got = diag_gradient_fixed_m(SIREN_MAX, 1.0, xs)
    assert np.isfinite(got[0]) and np.isnan(got[1]) and np.isfinite(got[2])


def test_softmax_extreme_gradient_is_quarter():
    assert softmax_extreme_gradient() == 0.25
    assert extreme_diag_gradient(SOFTMAX, 1.0, mode="max") == \
        pytest.approx(0.25, abs=1e-9)
    # The maximizer sits where f(x) equals the off-sum: x = ln M.
    m = 10.0
    val = diag_gradient_fixed_m(SOFTMAX, m, np.array([math.log(m)]))[0]
    assert val == pytest.approx(0.25, abs=1e-14)


def test_extreme_modes_are_consistent():
    vmax = extreme_diag_gradient(COS_MAX, 2.0, mode="max")
    vmin = extreme_diag_gradient(COS_MAX, 2.0, mode="min")
    vabs = extreme_diag_gradient(COS_MAX, 2.0, mode="abs")
    assert vmin <= vmax
    assert abs(vabs) == pytest.approx(max(abs(vmax), abs(vmin)), rel=1e-9)
    # Cos-max extrema come in symmetric pairs.
    assert vmin == pytest.approx(-vmax, rel=1e-6)


# -- closed-form extremum results --------------------------------------


def test_cosmax_interval_endpoints():
    iv = cosmax_extremum_interval(2.0)
    assert iv.lower == pytest.approx(-1.0 / 3.0)
    assert iv.upper == pytest.approx(1.0)
    assert not iv.unbounded


def test_cosmax_interval_unbounded_below_one():
    iv = cosmax_extremum_interval(0.5)
    assert iv.unbounded
    assert math.isinf(iv.lower) and math.isinf(iv.upper)


def test_cosmax_interval_pole_at_unit_m():
    with pytest.raises(PoleProximity):
        cosmax_extremum_interval(1.0)
    with pytest.raises(PoleProximity):
        cosmax_extremum_interval(-1.0)


def test_sin2max_extremum_location_is_a_maximizer():
    m = 1.0
    xstar = sin2max_extremum_location(m)
    assert 0.0 < xstar < math.pi / 2
    assert xstar == pytest.approx(0.48727, abs=1e-4)
    # The located point beats its neighborhood.
    probe = xstar + np.array([-1e-3, 0.0, 1e-3])
    ys = diag_gradient_fixed_m(SIN2_MAX, m, probe)
    assert ys[1] >= ys[0] and ys[1] >= ys[2]
    with pytest.raises(ValueError):
        sin2max_extremum_location(-1.0)


def test_filter_gain_peaks_where_f_matches_m():
    # g(M) = M/(M+f)^2 is largest when M = f(x_j).
    assert filter_gain(1.0, 1.0) == pytest.approx(0.25)
    assert filter_gain(0.5, 1.0) < 0.25
    assert filter_gain(2.0, 1.0) < 0.25
    with pytest.raises(DenominatorNearZero):
        filter_gain(1.0, -1.0)


def test_sinmax_constant_expectations_shrink_with_dimension():
    for d in (2, 8, 64):
        assert sinmax_constant_expected_score(d, 0.3) == pytest.approx(
            (1.0 + math.sin(0.3)) / d)
    g8 = sinmax_constant_expected_gradient(8, 0.3)
    g64 = sinmax_constant_expected_gradient(64, 0.3)
    assert abs(g64) < abs(g8)
    # Roughly cos(x)/d for large d.
    assert g64 == pytest.approx(math.cos(0.3) / 64, rel=0.05)


# -- Monte-Carlo measurements ------------------------------------------


def test_saturation_fraction_is_deterministic_and_contrasting():
    kwargs = dict(dim=16, trials=200, input_scale=8.0, epsilon=1e-4, seed=7)
    a = saturation_fraction(SOFTMAX, **kwargs)
    b = saturation_fraction(SOFTMAX, **kwargs)
    assert a.fraction_saturated == b.fraction_saturated
    assert a.sample_count == 200 * 16
    periodic = saturation_fraction(SIN_SOFTMAX, **kwargs)
    assert a.fraction_saturated > periodic.fraction_saturated


def test_saturation_near_zero_inputs_frozen_value():
    # At tiny input scale the off-sum shrinks with the inputs, so the
    # diagonal entries stay O(1) and almost nothing saturates.
    rep = saturation_fraction(SIN2_MAX, dim=64, trials=1000,
                              input_scale=0.01, epsilon=1e-4, seed=7)
    assert rep.fraction_saturated == pytest.approx(6.25e-5, abs=1e-12)


def test_saturation_counts_skipped_rows():
    rep = saturation_fraction(SIREN_MAX, dim=64, trials=50,
                              input_scale=8.0, epsilon=1e-4, seed=7)
    assert rep.skipped_rows + rep.sample_count // 64 == 50


def test_submersion_curve_decreases():
    curve = submersion_curve([4, 32], trials=100, seed=7)
    assert curve.y_values[1] < curve.y_values[0]


# -- curves and CSV ----------------------------------------------------


def test_gradient_curve_has_gaps_at_guard_points():
    curve = gradient_curve(SIREN_MAX, 1.0, 0.0, math.pi, 101)
    assert curve.params["nan_points"] >= 1
    assert np.isnan(curve.y_values).sum() == curve.params["nan_points"]


def test_extremum_vs_m_curve_orders_values():
    curve = extremum_vs_m_curve(SOFTMAX, [0.5, 1.0, 10.0])
    np.testing.assert_allclose(curve.y_values, 0.25, atol=1e-6)


def test_curve_csv_roundtrip(tmp_path):
    curve = CurveSeries(x_values=np.array([0.0, 1.0, 2.0]),
                        y_values=np.array([0.5, math.nan, -1.5]),
                        label="demo", params={"M": 2.0})
    path = tmp_path / "curve.csv"
    curve.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y"
    assert lines[1].split(",") == ["0.0", "0.5"]
    assert lines[2] == "1.0,"  # NaN becomes an empty field
    meta = json.loads((tmp_path / "curve.csv.meta.json").read_text())
    assert meta["label"] == "demo"
    assert meta["params"]["M"] == 2.0


# -- pre-normalization -------------------------------------------------


def test_row_normalize_whitens():
    z = row_normalize(_rng(4).normal(2.0, 3.0, size=32))
    assert z.mean() == pytest.approx(0.0, abs=1e-12)
    assert z.var() == pytest.approx(1.0, rel=1e-12)


def test_row_normalize_rejects_constant_rows():
    with pytest.raises(DegenerateRow):
        row_normalize(np.full(8, 3.5))


def test_row_normalize_jacobian_matches_finite_differences():
    x = _rng(5).normal(size=6)
    a = row_normalize_jacobian(x).entries
    h = 1e-6
    for k in range(6):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        col = (row_normalize(xp) - row_normalize(xm)) / (2.0 * h)
        np.testing.assert_allclose(a[:, k], col, atol=1e-8)


def test_prenormed_scores_are_scale_and_shift_invariant():
    x = _rng(6).normal(size=8)
    a = prenormed_scores(SOFTMAX, x).scores
    b = prenormed_scores(SOFTMAX, 10.0 * x + 3.0).scores
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_prenormed_jacobian_matches_finite_differences():
    x = _rng(7).normal(size=6)
    a = prenormed_jacobian(SIN_SOFTMAX, x).entries
    h = 1e-6
    for k in range(6):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        col = (prenormed_scores(SIN_SOFTMAX, xp).scores
               - prenormed_scores(SIN_SOFTMAX, xm).scores) / (2.0 * h)
        np.testing.assert_allclose(a[:, k], col, atol=1e-8)
