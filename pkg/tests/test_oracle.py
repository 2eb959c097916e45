import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpfield import oracle
from cpfield.families import ParamFunction
from cpfield.integrate import IntegrationRegion, integrate
from cpfield.model import Box, UnderCurve
from cpfield.oracle import (
    AtomicIntensityWarning,
    centering,
    cov_theorem1,
    cov_theorem2,
    cov_theorem3,
    intensity_threshold,
    marginal_quantile,
    theorem1_block,
    theorem2_block,
    theorem3_block,
    time_quantile,
)
from cpfield.rng import RngStream
from cpfield.sampler import sample_field
from cpfield.verify import Target, compare_to_oracle, run_replications

from conftest import atomic_rate, constant_rate, linear_rate, make_spec, triangle, unit_box

grid_t = st.floats(0.0, 1.0)


# -- quantiles -------------------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.1, 0.5, 0.9, 1.0])
def test_time_quantile_closed_forms(t):
    assert time_quantile(constant_rate(2.0), t) == pytest.approx(t, abs=1e-10)
    assert time_quantile(linear_rate(), t) == pytest.approx(-1 + np.sqrt(1 + 3 * t), abs=1e-10)


def test_time_quantile_of_one_is_horizon():
    assert time_quantile(linear_rate(), 1.0) == 1.0


def test_intensity_threshold_atomic():
    r = atomic_rate()
    for t in (0.05, 0.2, 1 / 3):
        assert intensity_threshold(r, t) == 1.0
    for t in (0.34, 0.6, 1.0):
        assert intensity_threshold(r, t) == 2.0


def test_intensity_threshold_continuous():
    # P(rate(X1) <= l) = (l**2 - 1) / 3 for rate 1 + t
    for t in (0.1, 0.5, 0.9):
        assert intensity_threshold(linear_rate(), t) == pytest.approx(np.sqrt(1 + 3 * t), abs=1e-9)


def test_quantile_rejects_out_of_range():
    with pytest.raises(ValueError):
        time_quantile(linear_rate(), 1.2)


def test_triangle_marginal_quantiles():
    tri = triangle()
    for t in (0.2, 0.5, 0.8):
        assert marginal_quantile(tri, 0, t) == pytest.approx(np.sqrt(t), abs=1e-6)
        assert marginal_quantile(tri, 1, t) == pytest.approx(1 - np.sqrt(1 - t), abs=1e-6)


# -- centering and field covariance ----------------------------------------


def test_centering_examples():
    assert not centering(make_spec(unit_box(2)), [0.5, 0.5]).any()
    spec = make_spec(unit_box(1), mean=ParamFunction.affine([0.0], [[1.0]]))
    assert centering(spec, [0.5]) == pytest.approx([0.125], abs=1e-6)


def test_centering_against_monte_carlo():
    mean = ParamFunction.affine([1.0, -0.5], [[2.0, 0.0], [0.0, 1.0]])
    spec = make_spec(UnderCurve(linear_rate()), mean=mean, cov=ParamFunction.constant(np.eye(2), dim=2),
                     d2=2, nu=100_000)
    u = np.array([0.6, 1.2])
    s = sample_field(spec, RngStream(17))
    w = s.Y * np.all(s.X <= u, axis=1)[:, None]
    se = w.std(axis=0, ddof=1) / np.sqrt(s.eta)
    assert np.all(np.abs(w.mean(axis=0) - centering(spec, u)) <= 4 * se)


def test_theorem1_rectangle():
    spec = make_spec(unit_box(2))
    assert cov_theorem1(spec, [0.5, 0.8], [0.7, 0.6])[0, 0] == pytest.approx(0.30, abs=1e-6)


def test_theorem1_noiseless_mean_variance():
    spec = make_spec(unit_box(1), mean=ParamFunction.affine([0.0], [[1.0]]),
                     cov=ParamFunction.zero((1, 1), 1))
    assert cov_theorem1(spec, [1.0], [1.0])[0, 0] == pytest.approx(1 / 12, abs=1e-6)


def _field_closed_form(u1, u2):
    # unit square, m(v) = v1, sigma^2 = 1:
    # int_{[0,a]x[0,b]} (1 + v1^2) - c(u1) c(u2),  c(u) = u1^2 u2 / 2
    a, b = min(u1[0], u2[0]), min(u1[1], u2[1])
    c = lambda u: u[0] ** 2 * u[1] / 2
    return a * b + a**3 * b / 3 - c(u1) * c(u2)


@given(st.tuples(grid_t, grid_t), st.tuples(grid_t, grid_t))
@settings(max_examples=15)
def test_theorem1_closed_form_affine_mean(u1, u2):
    spec = make_spec(unit_box(2), mean=ParamFunction.affine([0.0], [[1.0], [0.0]]))
    assert cov_theorem1(spec, u1, u2)[0, 0] == pytest.approx(_field_closed_form(u1, u2), abs=2e-5)


def test_theorem1_symmetry_exact():
    spec = make_spec(unit_box(2), mean=ParamFunction.affine([0.0, 1.0], [[1.0, 0.0], [0.0, 2.0]]),
                     cov=ParamFunction.constant([[2.0, 0.5], [0.5, 1.0]], dim=2), d2=2)
    k12 = cov_theorem1(spec, [0.3, 0.9], [0.8, 0.4])
    k21 = cov_theorem1(spec, [0.8, 0.4], [0.3, 0.9])
    np.testing.assert_array_equal(k12, k21.T)


def test_density_normalisation_on_long_interval():
    spec = make_spec(Box((0.0,), (2.0,)), nu=1000)
    assert cov_theorem1(spec, [2.0], [2.0])[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_product_term_uses_centering_at_each_corner():
    """Deterministic marks Y = 1 on [0, 1] give a Brownian bridge: cov u1 - u1 u2.

    The alternative product term (int_{A∧} m)^T (int_{A∧} m) would give u1 - u1^2,
    which also fails positive semidefiniteness on larger grids.
    """
    spec = make_spec(unit_box(1), mean=ParamFunction.constant([1.0]),
                     cov=ParamFunction.zero((1, 1), 1), nu=2000)
    assert cov_theorem1(spec, [0.3], [0.7])[0, 0] == pytest.approx(0.3 - 0.21, abs=1e-6)
    target = Target("theorem1", ((0.3,), (0.7,)))
    rep = compare_to_oracle(run_replications(spec, target, 500, 2), theorem1_block(spec, target.args), 0.02)
    assert rep.passed
    assert abs(rep.empirical[0, 1, 0, 0] - (0.3 - 0.09)) > 0.05
    # the intersection-only product term is not positive semidefinite
    g = np.array([[min(a, b) - min(a, b) ** 2 for b in (0.2, 0.5, 0.9)] for a in (0.2, 0.5, 0.9)])
    assert np.linalg.eigvalsh(g).min() < -1e-3


@given(st.tuples(grid_t, grid_t), st.tuples(grid_t, grid_t))
@settings(max_examples=15)
def test_theorem1_nesting_monotone(u, du):
    spec = make_spec(UnderCurve(linear_rate()),
                     cov=ParamFunction.affine([[1.0]], [[[1.0]], [[0.0]]]))
    lo = np.array([u[0], 2 * u[1]])
    hi = lo + np.array([du[0], 2 * du[1]])
    assert cov_theorem1(spec, lo, lo)[0, 0] <= cov_theorem1(spec, hi, hi)[0, 0] + 1e-8


# -- coordinate orderings --------------------------------------------------


def test_theorem2_examples():
    spec = make_spec(unit_box(2))
    assert cov_theorem2(spec, 0, 0.5, 1, 0.7)[0, 0] == pytest.approx(0.35, abs=1e-8)
    assert cov_theorem2(spec, 0, 0.5, 0, 0.7)[0, 0] == pytest.approx(0.5, abs=1e-8)


def test_theorem2_requires_zero_mean():
    spec = make_spec(unit_box(1), mean=ParamFunction.constant([1.0]))
    with pytest.raises(ValueError):
        cov_theorem2(spec, 0, 0.5, 0, 0.5)


@given(grid_t, grid_t)
@settings(max_examples=15)
def test_theorem2_transpose_symmetry(t1, t2):
    spec = make_spec(triangle(), cov=ParamFunction.constant([[2.0, 0.3], [0.3, 1.0]], dim=2), d2=2)
    a = cov_theorem2(spec, 0, t1, 1, t2)
    b = cov_theorem2(spec, 1, t2, 0, t1)
    np.testing.assert_allclose(a, b.T, atol=1e-12)


def test_theorem2_endpoint_identity():
    cov = ParamFunction.affine([[1.0]], [[[1.0]], [[2.0]]])
    spec = make_spec(triangle(), cov=cov)
    full = integrate(lambda x: cov(x), IntegrationRegion(spec.domain)).value / 0.5
    for i in range(2):
        np.testing.assert_allclose(cov_theorem2(spec, i, 1.0, i, 1.0), full, atol=2e-5)


def test_modes_agree_on_unit_cube():
    spec = make_spec(unit_box(3))
    a = theorem2_block(spec, (0.2, 0.5, 0.9), "paper_literal")
    b = theorem2_block(spec, (0.2, 0.5, 0.9), "quantile_normalized")
    np.testing.assert_allclose(a.values, b.values, atol=1e-8)


def test_triangle_quantile_mode_matches_monte_carlo():
    spec = make_spec(triangle(), nu=2000)
    target = Target("theorem2", (0.5,))
    batch = run_replications(spec, target, 500, 5)
    emp = np.var(batch.valid[:, 0, 0], ddof=1)
    q = cov_theorem2(spec, 0, 0.5, 0, 0.5, "quantile_normalized")[0, 0]
    lit = cov_theorem2(spec, 0, 0.5, 0, 0.5, "paper_literal")[0, 0]
    assert q == pytest.approx(0.5, abs=1e-5)
    assert lit == pytest.approx(0.25, abs=1e-5)
    assert abs(emp - q) <= 0.05
    assert abs(emp - lit) > 0.1


@given(st.lists(grid_t, min_size=1, max_size=4, unique=True))
@settings(max_examples=10)
def test_theorem2_gram_psd(grid):
    block = theorem2_block(make_spec(triangle()), grid)
    assert block.min_eigenvalue() >= -1e-8
    np.testing.assert_allclose(block.values, block.values.transpose(1, 0, 3, 2), atol=1e-15)


# -- time / intensity orderings --------------------------------------------


def test_constant_rate_blocks():
    spec = make_spec(UnderCurve(constant_rate(2.0)))
    for t1, t2 in [(0.25, 0.75), (0.6, 0.3)]:
        assert cov_theorem3(spec, "11", t1, t2)[0, 0] == pytest.approx(min(t1, t2), abs=1e-6)
        assert cov_theorem3(spec, "22", t1, t2)[0, 0] == pytest.approx(min(t1, t2), abs=1e-6)
        # time prefix and random intensity rank are independent
        assert cov_theorem3(spec, "12", t1, t2)[0, 0] == pytest.approx(t1 * t2, abs=1e-6)


@pytest.mark.parametrize("block", ["11", "12", "21", "22"])
def test_increasing_rate_blocks_are_min(block):
    spec = make_spec(UnderCurve(linear_rate()))
    for t1, t2 in [(0.25, 0.75), (0.75, 0.5), (0.5, 0.5)]:
        assert cov_theorem3(spec, block, t1, t2)[0, 0] == pytest.approx(min(t1, t2), abs=2e-5)


def test_atomic_rate_variance_closed_form(atomic_curve_spec):
    for t in (0.1, 0.2, 1 / 3, 0.6, 0.9):
        expect = 4 * t if t <= 1 / 3 else t + 1
        assert cov_theorem3(atomic_curve_spec, "22", t, t)[0, 0] == pytest.approx(expect, abs=2e-5)


def test_atomic_rate_cross_block(atomic_curve_spec):
    # first 20% in time lie at rate 2, weight (0.6 - 1/3) / (2/3) = 0.4, mass 0.2
    assert cov_theorem3(atomic_curve_spec, "12", 0.2, 0.6)[0, 0] == pytest.approx(0.08, abs=1e-5)
    assert cov_theorem3(atomic_curve_spec, "12", 0.6, 0.2)[0, 0] == pytest.approx(0.0, abs=1e-9)


def test_theorem3_endpoint_blocks_coincide(atomic_curve_spec):
    vals = [cov_theorem3(atomic_curve_spec, b, 1.0, 1.0)[0, 0] for b in ("11", "12", "22")]
    assert vals == pytest.approx([vals[0]] * 3, abs=2e-5)


def test_mode_agreement_through_time_quantile():
    spec = make_spec(UnderCurve(linear_rate()))
    rate = spec.domain.rate
    for t1, t2 in [(0.25, 0.75), (0.7, 0.4)]:
        s1, s2 = time_quantile(rate, t1), time_quantile(rate, t2)
        for block in ("11", "12", "22"):
            lit = cov_theorem3(spec, block, s1, s2, "paper_literal")
            q = cov_theorem3(spec, block, t1, t2, "quantile_normalized")
            np.testing.assert_allclose(lit, q, atol=3e-5)


def test_paper_literal_warns_on_atoms(atomic_curve_spec):
    with pytest.warns(AtomicIntensityWarning):
        cov_theorem3(atomic_curve_spec, "22", 0.2, 0.6, "paper_literal")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cov_theorem3(atomic_curve_spec, "22", 0.2, 0.6)


def test_theorem3_preconditions():
    with pytest.raises(ValueError):
        cov_theorem3(make_spec(unit_box(2)), "11", 0.5, 0.5)
    spec = make_spec(UnderCurve(linear_rate()), mean=ParamFunction.affine([0.0], [[0.0], [1.0]]))
    with pytest.raises(ValueError):
        cov_theorem3(spec, "11", 0.5, 0.5)
    with pytest.raises(ValueError):
        cov_theorem3(make_spec(UnderCurve(linear_rate())), "33", 0.5, 0.5)


@given(st.lists(grid_t, min_size=1, max_size=3, unique=True))
@settings(max_examples=8)
def test_theorem3_gram_psd(grid):
    cov = ParamFunction.piecewise_constant([0.5], [[[1.0]], [[4.0]]], axis=0, dim=2)
    block = theorem3_block(make_spec(UnderCurve(atomic_rate()), cov=cov), grid)
    assert block.min_eigenvalue() >= -1e-8
    assert block.estimates_agree(3.0)


def test_block_export(tmp_path, atomic_curve_spec):
    block = theorem3_block(atomic_curve_spec, (0.2, 0.6))
    block.write_csv(tmp_path / "o.csv")
    block.write_metadata(tmp_path / "o.json")
    lines = open(tmp_path / "o.csv").read().splitlines()
    assert lines[0] == "block,t1,t2,row,col,value,err_estimate"
    assert len(lines) == 1 + 2 * 2 * 4
    row = next(line.split(",") for line in lines if line.startswith("12,0.2,0.6,1,1,"))
    assert float(row[5]) == pytest.approx(0.08, abs=1e-9)
    meta = json.load(open(tmp_path / "o.json"))
    assert meta["mode"] == "quantile_normalized" and meta["atomic_intensity"]


def test_shifted_block():
    block = theorem2_block(make_spec(unit_box(1)), (0.5,))
    assert block.shifted(1.0).values[0, 0, 0, 0] == pytest.approx(1.5)


def test_oracle_block_dispatch():
    spec = make_spec(unit_box(2))
    b = oracle.oracle_block(spec, Target("theorem1", ((1.0, 1.0),)))
    assert b.values.shape == (1, 1, 1, 1) and b.values[0, 0, 0, 0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        theorem2_block(spec, (0.5,), "raw")
