import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cpfield.families import ParamFunction, Rate
from cpfield.model import Box, Indicator, HalfSpace, MarkModel, ModelSpec, UnderCurve

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def const_cov(d2=1, scale=1.0, dim=1):
    return ParamFunction.constant(scale * np.eye(d2), dim=dim)


def make_spec(domain, *, mean=None, cov=None, d2=1, nu=2000.0, noise="gaussian"):
    d1 = domain.d1
    mean = mean if mean is not None else ParamFunction.zero((d2,), dim=d1)
    cov = cov if cov is not None else const_cov(d2, dim=d1)
    return ModelSpec(domain, MarkModel(d2, mean, cov, noise), nu)


def unit_box(d1):
    return Box((0.0,) * d1, (1.0,) * d1)


def linear_rate():
    return Rate(ParamFunction.affine(1.0, [1.0]), 1.0)


def atomic_rate():
    return Rate(ParamFunction.piecewise_constant([0.5], [2.0, 1.0]), 1.0)


def constant_rate(c=1.0):
    return Rate(ParamFunction.constant(c), 1.0)


def triangle():
    # {0 <= v2 <= v1 <= 1}
    return Indicator((0.0, 0.0), (1.0, 1.0), (HalfSpace((-1.0, 1.0), 0.0),))


@pytest.fixture
def brownian_spec():
    return make_spec(unit_box(1))


@pytest.fixture
def linear_curve_spec():
    return make_spec(UnderCurve(linear_rate()), d2=1)


@pytest.fixture
def atomic_curve_spec():
    cov = ParamFunction.piecewise_constant([0.5], [[[1.0]], [[4.0]]], axis=0, dim=2)
    return make_spec(UnderCurve(atomic_rate()), cov=cov, nu=3000.0)
