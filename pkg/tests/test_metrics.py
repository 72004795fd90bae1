import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riloc.metrics import (
    CdfSummary,
    ErrorSeries,
    empirical_cdf,
    interpolate_positions,
    median_cdf,
    position_errors,
    read_positions_csv,
    write_cdf_csv,
    write_errors_csv,
    write_quartiles_csv,
)

errors_st = arrays(np.float64, st.integers(1, 200), elements=st.floats(0.0, 100.0))


def test_type7_quartiles():
    c = empirical_cdf([1.0, 2.0, 3.0, 4.0])
    assert (c.q1, c.q2, c.q3) == pytest.approx((1.75, 2.5, 3.25))


def test_constant_errors():
    c = empirical_cdf(np.full(17, 0.7))
    assert c.q1 == c.q2 == c.q3 == pytest.approx(0.7)
    np.testing.assert_array_equal(c.fraction, 1.0)


def test_cdf_reaches_one_at_max():
    c = empirical_cdf([0.3, 5.0, 1.2])
    assert c.evaluate(5.0) == 1.0
    assert c.evaluate(0.29) == 0.0
    assert c.evaluate(1.2) == pytest.approx(2 / 3)


def test_empty_series_rejected():
    with pytest.raises(ValueError):
        empirical_cdf([])


def test_error_series_validation():
    with pytest.raises(ValueError):
        ErrorSeries(np.arange(3.0), np.array([1.0, -1.0, 0.0]))
    with pytest.raises(ValueError):
        ErrorSeries(np.arange(3.0), np.array([1.0, np.nan, 0.0]))
    with pytest.raises(ValueError):
        ErrorSeries(np.arange(2.0), np.zeros(3))
    assert ErrorSeries(np.arange(2.0), np.array([3.0, 4.0])).rmse() == pytest.approx(np.sqrt(12.5))


@given(errors_st)
def test_cdf_monotone_and_quartiles_ordered(e):
    c = empirical_cdf(e)
    assert np.all(np.diff(c.fraction) >= 0)
    assert 0 < c.fraction[0] and c.fraction[-1] == 1.0
    assert c.q1 <= c.q2 <= c.q3
    np.testing.assert_allclose([c.q1, c.q2, c.q3], np.quantile(e, [0.25, 0.5, 0.75]))


@given(errors_st, st.floats(0.0, 1.0))
def test_step_cdf_matches_counting(e, q):
    c = empirical_cdf(e)
    x = float(np.quantile(e, q))
    assert c.evaluate(x) == pytest.approx(np.mean(e <= x))


def test_median_of_single_run_is_itself():
    c = empirical_cdf([0.5, 1.0, 4.0, 2.0])
    m = median_cdf([c])
    np.testing.assert_array_equal(m.grid, c.grid)
    np.testing.assert_array_equal(m.fraction, c.fraction)
    assert (m.q1, m.q2, m.q3) == (c.q1, c.q2, c.q3)


def test_median_picks_middle_curve():
    base = np.linspace(0.1, 3.0, 30)
    runs = [empirical_cdf(base), empirical_cdf(base + 1.0), empirical_cdf(base + 0.5)]
    m = median_cdf(runs)
    np.testing.assert_array_equal(m.fraction, runs[2].evaluate(m.grid))
    assert m.q2 == pytest.approx(runs[2].quantile(0.5))


def test_median_of_identical_runs():
    c = empirical_cdf(np.arange(1.0, 11.0))
    m = median_cdf([c, c, c])
    np.testing.assert_array_equal(m.fraction, c.fraction)
    assert m.q2 == c.quantile(0.5)


@given(st.lists(errors_st, min_size=1, max_size=6))
def test_median_cdf_is_a_cdf(runs):
    m = median_cdf([empirical_cdf(e) for e in runs])
    assert np.all(np.diff(m.fraction) >= 0)
    assert m.fraction[-1] == 1.0
    assert m.q1 <= m.q2 <= m.q3


def test_median_needs_a_run():
    with pytest.raises(ValueError):
        median_cdf([])


def test_cdf_summary_validation():
    with pytest.raises(ValueError):
        CdfSummary(np.array([1.0, 2.0]), np.array([0.8, 0.5]), 1, 1, 1)


def test_position_errors_interpolate_ground_truth():
    t_gt = np.array([0.0, 1.0, 2.0])
    p_gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1.0, 0]])
    e = position_errors([0.5, 1.5, 3.0], [[0.5, 0, 0], [1.0, 0.5, 0], [1.0, 1.0, 1.0]], t_gt, p_gt)
    np.testing.assert_allclose(e.errors, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(interpolate_positions([-1.0], t_gt, p_gt), [[0.0, 0, 0]])


def test_csv_writers(tmp_path):
    c = empirical_cdf([1.0, 3.0])
    write_cdf_csv(c, tmp_path / "cdf.csv")
    assert (tmp_path / "cdf.csv").read_text() == "error,fraction\n1.0,0.5\n3.0,1.0\n"
    write_quartiles_csv([("pf-imu", c)], tmp_path / "q.csv")
    assert (tmp_path / "q.csv").read_text().splitlines() == ["label,q1,q2,q3,min,max", "pf-imu,1.5,2.0,2.5,1.0,3.0"]
    write_errors_csv(ErrorSeries(np.array([0.0, 0.1]), np.array([1.0, 2.0])), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "t,error\n0.0,1.0\n0.1,2.0\n"


def test_read_positions_csv(tmp_path):
    p = tmp_path / "est.csv"
    p.write_text("pz,t,px,py,extra\n1,0.0,2,3,x\n1,0.5,2.5,3,y\n")
    t, pos = read_positions_csv(p)
    np.testing.assert_array_equal(t, [0.0, 0.5])
    np.testing.assert_array_equal(pos, [[2, 3, 1], [2.5, 3, 1]])


@pytest.mark.parametrize(
    "content", ["", "t,px,py\n0,1,2\n", "t,px,py,pz\n", "t,px,py,pz\n0,1,2,abc\n", "t,px,py,pz\n1,0,0,0\n0,0,0,0\n"]
)
def test_read_positions_csv_errors(tmp_path, content):
    p = tmp_path / "bad.csv"
    p.write_text(content)
    with pytest.raises(ValueError):
        read_positions_csv(p)
