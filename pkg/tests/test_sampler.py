import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cpfield.families import ParamFunction
from cpfield.model import Ball, Indicator, MarkModel, UnderCurve
from cpfield.rng import RngStream
from cpfield.sampler import (
    SamplingError,
    lift_times_to_field,
    project_field_to_times,
    sample_count,
    sample_field,
    sample_inhomogeneous_times,
    sample_marks,
    sample_points,
    write_samples_csv,
)

from conftest import constant_rate, linear_rate, make_spec, unit_box


def test_count_mean_and_variance():
    root = RngStream(11)
    draws = np.array([sample_count(1000, 1.0, root.spawn(r)) for r in range(10_000)])
    assert 998.7 <= draws.mean() <= 1001.3
    assert draws.var(ddof=1) == pytest.approx(1000, rel=0.05)


def test_count_preconditions_and_determinism():
    with pytest.raises(ValueError):
        sample_count(0, 1.0, RngStream(0))
    with pytest.raises(ValueError):
        sample_count(1.0, 0.0, RngStream(0))
    assert sample_count(50, 1, RngStream(3, (1,))) == sample_count(50, 1, RngStream(3, (1,)))


def test_unit_cube_points_uniform():
    pts = sample_points(unit_box(3), 100_000, RngStream(2))
    assert np.all(np.abs(pts.mean(axis=0) - 0.5) <= 0.004)
    for k in range(3):
        assert stats.kstest(pts[:, k], "uniform").statistic <= 1.63 / np.sqrt(len(pts))


def test_under_curve_acceptance_rate():
    pts, acc = sample_points(UnderCurve(linear_rate()), 50_000, RngStream(4), return_acceptance=True)
    assert acc == pytest.approx(0.75, abs=0.01)
    assert np.all(pts[:, 1] <= 1 + pts[:, 0])


def test_zero_points():
    assert sample_points(UnderCurve(linear_rate()), 0, RngStream(0)).shape == (0, 2)
    assert sample_points(unit_box(2), 0, RngStream(0)).shape == (0, 2)


def test_degenerate_region_aborts():
    sliver = Indicator((-1.0, -1.0), (1.0, 1.0), (Ball((0.0, 0.0), 1e-4),))
    with pytest.raises(SamplingError):
        sample_points(sliver, 10, RngStream(0))


def test_noiseless_marks_equal_mean():
    marks = MarkModel(1, ParamFunction.affine([0.0], [[2.0]]), ParamFunction.zero((1, 1), 1))
    X = np.linspace(0, 1, 7)[:, None]
    np.testing.assert_array_equal(sample_marks(marks, X, RngStream(0)), 2 * X)


@pytest.mark.parametrize("noise", ["gaussian", "rademacher", "uniform"])
def test_mark_covariance(noise):
    cov = np.array([[4.0, 2.0], [2.0, 3.0]])
    marks = MarkModel(2, ParamFunction.zero((2,), 1), ParamFunction.constant(cov), noise)
    Y = sample_marks(marks, np.zeros((100_000, 1)), RngStream(9))
    emp = np.cov(Y.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.02


def test_rademacher_values():
    marks = MarkModel(1, ParamFunction.zero((1,), 1), ParamFunction.constant([[1.0]]), "rademacher")
    Y = sample_marks(marks, np.zeros((1000, 1)), RngStream(1))
    assert set(np.unique(Y)) == {-1.0, 1.0}


def test_heterogeneous_cov_by_region():
    cov = ParamFunction.piecewise_constant([0.5], [[[1.0]], [[4.0]]])
    marks = MarkModel(1, ParamFunction.zero((1,), 1), cov)
    X = np.r_[np.full(50_000, 0.25), np.full(50_000, 0.75)][:, None]
    Y = sample_marks(marks, X, RngStream(3))[:, 0]
    assert Y[:50_000].var() == pytest.approx(1.0, rel=0.03)
    assert Y[50_000:].var() == pytest.approx(4.0, rel=0.03)


def test_field_points_in_domain_and_deterministic():
    spec = make_spec(UnderCurve(linear_rate()), nu=300)
    a = sample_field(spec, RngStream(5).spawn(2))
    b = sample_field(spec, RngStream(5).spawn(2))
    assert np.all(spec.domain.contains(a.X))
    assert a.X.tobytes() == b.X.tobytes() and a.Y.tobytes() == b.Y.tobytes()
    assert a.rep_index == 2


def test_field_count_mean():
    spec = make_spec(unit_box(2), nu=500)
    root = RngStream(8)
    etas = [sample_field(spec, root.spawn(r)).eta for r in range(1000)]
    assert abs(np.mean(etas) - 500) <= 3


def test_sample_is_read_only():
    s = sample_field(make_spec(unit_box(1), nu=10), RngStream(0))
    with pytest.raises(ValueError):
        s.X[0, 0] = 1.0


def test_constant_rate_interarrivals_exponential():
    nu, c = 10_000.0, 2.0
    rate = constant_rate(c)
    times = sample_inhomogeneous_times(rate, 1.0, nu / 2, RngStream(12))
    gaps = np.diff(np.r_[0.0, times])
    assert len(gaps) > 9000
    d = stats.kstest(gaps, "expon", args=(0, 1 / (nu / 2 * c))).statistic
    assert d <= 1.63 / np.sqrt(len(gaps))


def test_thinning_with_flat_rate_accepts_all():
    rate = constant_rate(1.5)
    gen_n = RngStream(4).generator().poisson(200 * 1.5)
    times = sample_inhomogeneous_times(rate, 1.0, 200, RngStream(4))
    assert len(times) == gen_n


def test_inhomogeneous_mean_count():
    root = RngStream(6)
    counts = [len(sample_inhomogeneous_times(linear_rate(), 1.0, 1000, root.spawn(r)))
              for r in range(200)]
    assert abs(np.mean(counts) - 1500) <= 4 * np.sqrt(1500 / 200)


def test_lambda_max_below_sup_rejected():
    with pytest.raises(ValueError):
        sample_inhomogeneous_times(linear_rate(), 1.0, 10, RngStream(0), lambda_max=1.9)


def test_projected_interval_counts_poisson():
    # counts on [0, 0.5] and [0.5, 1] have mean and variance nu * int lambda
    root = RngStream(21)
    rate, nu = linear_rate(), 400.0
    counts = []
    for r in range(500):
        t = project_field_to_times(
            lift_times_to_field(sample_inhomogeneous_times(rate, 1.0, nu, root.spawn(r)),
                                rate, root.spawn(r).child("lift")))
        counts.append([np.sum(t <= 0.5), np.sum(t > 0.5)])
    counts = np.array(counts)
    expect = nu * np.array([0.625, 0.875])
    se = np.sqrt(expect / 500)
    assert np.all(np.abs(counts.mean(axis=0) - expect) <= 4 * se)
    # variance of a Poisson count equals its mean; SE of a sample variance ~ mean*sqrt(2/R)
    assert np.all(np.abs(counts.var(axis=0, ddof=1) - expect) <= 4 * expect * np.sqrt(2 / 499))


def test_lift_within_curve_and_round_trip():
    rate = linear_rate()
    times = sample_inhomogeneous_times(rate, 1.0, 500, RngStream(1))
    pts = lift_times_to_field(times, rate, RngStream(2))
    assert np.all((pts[:, 1] >= 0) & (pts[:, 1] <= rate(pts[:, 0])))
    np.testing.assert_array_equal(project_field_to_times(pts), times)


def test_project_examples():
    assert project_field_to_times(np.empty((0, 2))).shape == (0,)
    pts = np.array([[0.7, 0.0], [0.1, 0.0], [0.4, 1.0]])
    np.testing.assert_array_equal(project_field_to_times(pts), [0.1, 0.4, 0.7])


@given(st.lists(st.floats(0, 1), max_size=50))
def test_round_trip_property(ts):
    ts = np.sort(np.array(ts, dtype=float))
    pts = lift_times_to_field(ts, linear_rate(), RngStream(0))
    np.testing.assert_array_equal(project_field_to_times(pts), ts)


def test_samples_csv(tmp_path):
    spec = make_spec(unit_box(2), nu=5)
    samples = [sample_field(spec, RngStream(1).spawn(r)) for r in range(3)]
    write_samples_csv(tmp_path / "s.csv", samples)
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["rep", "i", "x1", "x2", "y1"]
    assert len(rows) == 1 + sum(s.eta for s in samples)
    assert float(rows[1][2]) == samples[0].X[0, 0] if samples[0].eta else True
