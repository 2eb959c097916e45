"""JSON configuration documents: schema, validation and model construction.

A document has the model fields ``domain``, ``marks`` and ``nu`` plus an
optional ``run`` section with command parameters. Unknown keys are rejected
everywhere; every error carries the dotted location of the offending field.
"""

from __future__ import annotations

import itertools
import json
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .families import ParamFunction, Rate
from .model import (
    Ball,
    Box,
    HalfSpace,
    Indicator,
    MarkModel,
    ModelError,
    ModelSpec,
    UnderCurve,
    check_cov,
)

Nested = Union[float, list]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending location."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# -- function families -----------------------------------------------------


class ZeroParams(_Strict):
    pass


class ConstantParams(_Strict):
    value: Nested


class AffineParams(_Strict):
    value: Nested
    coef: list


class PiecewiseParams(_Strict):
    breaks: list[float]
    values: list
    axis: int = 0


class PolynomialParams(_Strict):
    coeffs: list
    axis: int = 0


class ZeroFn(_Strict):
    family: Literal["zero"]
    params: ZeroParams = ZeroParams()


class ConstantFn(_Strict):
    family: Literal["constant"]
    params: ConstantParams


class AffineFn(_Strict):
    family: Literal["affine"]
    params: AffineParams


class PiecewiseFn(_Strict):
    family: Literal["piecewise_constant"]
    params: PiecewiseParams


class PolynomialFn(_Strict):
    family: Literal["polynomial"]
    params: PolynomialParams


FunctionSpec = Annotated[
    Union[ZeroFn, ConstantFn, AffineFn, PiecewiseFn, PolynomialFn],
    Field(discriminator="family"),
]


# -- domains ---------------------------------------------------------------


class BallSpec(_Strict):
    type: Literal["ball"]
    center: list[float]
    radius: float = Field(gt=0)


class HalfSpaceSpec(_Strict):
    type: Literal["halfspace"]
    normal: list[float]
    offset: float


PredicateSpec = Annotated[Union[BallSpec, HalfSpaceSpec], Field(discriminator="type")]


class BoxSpec(_Strict):
    kind: Literal["box"]
    lower: list[float] = Field(min_length=1)
    upper: list[float] = Field(min_length=1)
    measure_hint: float | None = Field(default=None, gt=0)


class UnderCurveSpec(_Strict):
    kind: Literal["under_curve"]
    T: float = Field(gt=0)
    rate: FunctionSpec
    lambda_max: float | None = Field(default=None, gt=0)
    measure_hint: float | None = Field(default=None, gt=0)


class IndicatorSpec(_Strict):
    kind: Literal["indicator"]
    lower: list[float] = Field(min_length=1)
    upper: list[float] = Field(min_length=1)
    predicates: list[PredicateSpec] = []
    measure_hint: float | None = Field(default=None, gt=0)


DomainSpec = Annotated[
    Union[BoxSpec, UnderCurveSpec, IndicatorSpec], Field(discriminator="kind")
]


class MarksSpec(_Strict):
    d2: int = Field(ge=1)
    mean: FunctionSpec = ZeroFn(family="zero")
    cov: FunctionSpec
    noise: Literal["gaussian", "rademacher", "uniform"] = "gaussian"


class RunSpec(_Strict):
    target: Literal["theorem1", "theorem2", "theorem3"] | None = None
    grid: list[float] | None = None
    corners: list[list[float]] | None = None
    reps: int | None = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)
    tol: float = Field(default=0.05, ge=0)
    mode: Literal["paper_literal", "quantile_normalized"] = "quantile_normalized"
    nu_list: list[float] | None = None
    threads: int = Field(default=1, ge=1)


class RunConfig(_Strict):
    domain: DomainSpec
    marks: MarksSpec
    nu: float = Field(gt=0)
    run: RunSpec = RunSpec()


# -- loading ---------------------------------------------------------------


def _loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        lines = [f"{_loc(e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> RunConfig:
    """Read and validate a JSON document. ``OSError`` propagates unchanged."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc)


# -- model construction ----------------------------------------------------


def build_function(spec, dim: int, where: str) -> ParamFunction:
    p = spec.params
    try:
        if spec.family == "zero":
            raise ConfigError(f"{where}: zero family needs an explicit shape")
        if spec.family == "constant":
            return ParamFunction.constant(p.value, dim=dim)
        if spec.family == "affine":
            fn = ParamFunction.affine(p.value, p.coef)
            if fn.dim != dim:
                raise ConfigError(f"{where}.params.coef: expected {dim} rows, got {fn.dim}")
            return fn
        if spec.family == "piecewise_constant":
            return ParamFunction.piecewise_constant(p.breaks, p.values, axis=p.axis, dim=dim)
        return ParamFunction.polynomial(p.coeffs, axis=p.axis, dim=dim)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def _shaped(spec, shape, dim, where) -> ParamFunction:
    if spec.family == "zero":
        return ParamFunction.zero(shape, dim=dim)
    fn = build_function(spec, dim, where)
    if fn.shape != tuple(shape):
        raise ConfigError(f"{where}: expected output shape {tuple(shape)}, got {fn.shape}")
    return fn


def build_domain(spec):
    where = "domain"
    try:
        if spec.kind == "box":
            return Box(tuple(spec.lower), tuple(spec.upper), spec.measure_hint)
        if spec.kind == "under_curve":
            fn = _shaped(spec.rate, (), 1, "domain.rate")
            try:
                rate = Rate(fn, spec.T)
            except ValueError as exc:
                raise ConfigError(f"domain.rate: {exc}") from None
            return UnderCurve(rate, spec.lambda_max, spec.measure_hint)
        preds = []
        for k, p in enumerate(spec.predicates):
            if p.type == "ball":
                preds.append(Ball(tuple(p.center), p.radius))
            else:
                if not np.any(p.normal):
                    raise ConfigError(f"domain.predicates.{k}.normal: must be non-zero")
                preds.append(HalfSpace(tuple(p.normal), p.offset))
        return Indicator(tuple(spec.lower), tuple(spec.upper), tuple(preds), spec.measure_hint)
    except ModelError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _cov_probe_points(cov: ParamFunction, domain) -> np.ndarray:
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    if cov.family == "constant":
        return lo[None]
    if cov.family == "affine":
        # an affine matrix function is PSD on a box iff it is PSD at the vertices
        return np.array(list(itertools.product(*zip(lo, hi))))
    if cov.family == "piecewise_constant":
        return None
    s = np.linspace(lo[cov.axis], hi[cov.axis], 257)
    pts = np.repeat(lo[None], len(s), axis=0)
    pts[:, cov.axis] = s
    return pts


def build_marks(spec: MarksSpec, d1: int, domain) -> MarkModel:
    d2 = spec.d2
    mean = _shaped(spec.mean, (d2,), d1, "marks.mean")
    cov = _shaped(spec.cov, (d2, d2), d1, "marks.cov")
    try:
        if cov.family == "piecewise_constant":
            check_cov(cov.values)
        elif cov.family != "zero":
            check_cov(cov(_cov_probe_points(cov, domain)))
        return MarkModel(d2, mean, cov, spec.noise)
    except ModelError as exc:
        raise ConfigError(f"marks.cov: {exc}") from None


def build_model(cfg: RunConfig, nu: float | None = None) -> ModelSpec:
    """The :class:`ModelSpec` described by ``cfg`` (optionally at another ``nu``)."""
    domain = build_domain(cfg.domain)
    marks = build_marks(cfg.marks, domain.d1, domain)
    try:
        spec = ModelSpec(domain, marks, float(cfg.nu if nu is None else nu))
        domain.measure  # validates measure_hint
    except ModelError as exc:
        raise ConfigError(f"domain: {exc}") from None
    return spec
