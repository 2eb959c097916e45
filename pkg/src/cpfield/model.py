"""Domain regions, mark models and the full field specification."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate as spi
from scipy.linalg import lapack

from .families import ParamFunction, Rate
from .integrate import IntegrationRegion, integrate

NOISE_FAMILIES = ("gaussian", "rademacher", "uniform")
PSD_TOL = 1e-10
SYM_TOL = 1e-12
HINT_RTOL = 1e-6


class ModelError(ValueError):
    """An invalid domain, mark model or field specification."""


def _check_points(x, d1):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d1:
        raise ModelError(f"point dimension {x.shape[1]} does not match domain dimension {d1}")
    return x, single


class _Region:
    """Shared behaviour of the three region kinds.

    Subclasses provide ``d1``, ``lower``/``upper`` (the bounding box),
    ``_contains`` and ``slice_interval`` (the exact section along the last axis).
    """

    kind: str
    measure_hint: float | None

    def contains(self, v) -> np.ndarray | bool:
        x, single = _check_points(v, self.d1)
        inside = self._contains(x)
        return bool(inside[0]) if single else inside

    @cached_property
    def _measure(self) -> tuple[float, float]:
        value, err = self._compute_measure()
        if not value > 0 or not np.isfinite(value):
            raise ModelError(f"region has non-positive measure {value}")
        if self.measure_hint is not None:
            # numerically integrated measures are only known to their error estimate
            if abs(self.measure_hint - value) > HINT_RTOL * value + err:
                raise ModelError(
                    f"measure_hint {self.measure_hint} disagrees with computed measure {value}"
                )
            return float(self.measure_hint), err
        return value, err

    @property
    def measure(self) -> float:
        return self._measure[0]

    @property
    def measure_error(self) -> float:
        return self._measure[1]

    @property
    def box_volume(self) -> float:
        return float(np.prod(np.asarray(self.upper) - np.asarray(self.lower)))


@dataclass(frozen=True, eq=False)
class Box(_Region):
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    measure_hint: float | None = None
    kind = "box"

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or lo.ndim != 1 or len(lo) == 0:
            raise ModelError("box corners must be non-empty vectors of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ModelError("box corners must be finite")
        if np.any(hi <= lo):
            raise ModelError("box upper corner must exceed lower corner in every coordinate")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))

    @property
    def d1(self) -> int:
        return len(self.lower)

    def _contains(self, x):
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)

    def slice_interval(self, outer):
        n = len(outer)
        return np.full(n, self.lower[-1]), np.full(n, self.upper[-1])

    def _compute_measure(self):
        return self.box_volume, 0.0


@dataclass(frozen=True, eq=False)
class UnderCurve(_Region):
    """``{(x1, x2): 0 <= x1 <= T, 0 <= x2 <= rate(x1)}``."""

    rate: Rate
    lambda_max: float | None = None
    measure_hint: float | None = None
    kind = "under_curve"

    def __post_init__(self):
        sup = self.rate.bounds[1]
        if self.lambda_max is None:
            object.__setattr__(self, "lambda_max", sup)
        elif self.lambda_max < sup * (1 - 1e-12):
            raise ModelError(f"lambda_max {self.lambda_max} is below the rate supremum {sup}")

    d1 = 2

    @property
    def T(self) -> float:
        return self.rate.T

    @property
    def lambda_min(self) -> float:
        return self.rate.bounds[0]

    @property
    def lower(self):
        return (0.0, 0.0)

    @property
    def upper(self):
        return (self.T, float(self.lambda_max))

    def _contains(self, x):
        t = x[:, 0]
        ok = (t >= 0) & (t <= self.T) & (x[:, 1] >= 0)
        lam = self.rate(np.clip(t, 0.0, self.T))
        return ok & (x[:, 1] <= lam)

    def slice_interval(self, outer):
        return np.zeros(len(outer)), self.rate(outer[:, 0])

    def _compute_measure(self):
        pts = self.rate.breaks.tolist() or None
        value, err = spi.quad(self.rate, 0.0, self.T, points=pts, limit=200, epsabs=1e-12)
        return float(value), float(err)


@dataclass(frozen=True, eq=False)
class Ball:
    center: tuple[float, ...]
    radius: float

    def holds(self, x):
        return np.sum((x - np.asarray(self.center)) ** 2, axis=1) <= self.radius**2

    def clip(self, outer, lo, hi):
        c = np.asarray(self.center)
        r2 = self.radius**2 - np.sum((outer - c[:-1]) ** 2, axis=1)
        half = np.sqrt(np.maximum(r2, 0.0))
        lo = np.where(r2 >= 0, np.maximum(lo, c[-1] - half), np.inf)
        hi = np.where(r2 >= 0, np.minimum(hi, c[-1] + half), -np.inf)
        return lo, hi


@dataclass(frozen=True, eq=False)
class HalfSpace:
    """``normal . v <= offset``."""

    normal: tuple[float, ...]
    offset: float

    def holds(self, x):
        return x @ np.asarray(self.normal) <= self.offset

    def clip(self, outer, lo, hi):
        a = np.asarray(self.normal)
        rest = self.offset - outer @ a[:-1]
        if a[-1] > 0:
            hi = np.minimum(hi, rest / a[-1])
        elif a[-1] < 0:
            lo = np.maximum(lo, rest / a[-1])
        else:
            hi = np.where(rest >= 0, hi, -np.inf)
        return lo, hi


@dataclass(frozen=True, eq=False)
class Indicator(_Region):
    """Bounding box intersected with convex predicates (balls, half-spaces)."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    predicates: tuple = ()
    measure_hint: float | None = None
    kind = "indicator"

    def __post_init__(self):
        box = Box(self.lower, self.upper)
        object.__setattr__(self, "lower", box.lower)
        object.__setattr__(self, "upper", box.upper)
        for p in self.predicates:
            dim = len(p.center) if isinstance(p, Ball) else len(p.normal)
            if dim != self.d1:
                raise ModelError(f"predicate dimension {dim} does not match box dimension {self.d1}")
        object.__setattr__(self, "predicates", tuple(self.predicates))

    @property
    def d1(self) -> int:
        return len(self.lower)

    def _contains(self, x):
        ok = np.all((x >= self.lower) & (x <= self.upper), axis=1)
        for p in self.predicates:
            ok &= p.holds(x)
        return ok

    def slice_interval(self, outer):
        n = len(outer)
        lo, hi = np.full(n, self.lower[-1]), np.full(n, self.upper[-1])
        for p in self.predicates:
            lo, hi = p.clip(outer, lo, hi)
        return lo, hi

    def breaks(self) -> dict:
        """Extents of the balls along the leading axes, where sections appear."""
        out = {}
        for p in self.predicates:
            if isinstance(p, Ball):
                for k in range(self.d1 - 1):
                    edges = [p.center[k] - p.radius, p.center[k] + p.radius]
                    out[k] = np.union1d(out.get(k, np.empty(0)), edges)
        return out

    def _compute_measure(self):
        res = integrate(lambda x: np.ones(len(x)), IntegrationRegion(self, breaks=self.breaks()))
        return float(res.value), float(res.err)


DomainRegion = Box | UnderCurve | Indicator


def measure(domain) -> float:
    """Lebesgue measure of ``domain`` (hint-checked, cached)."""
    return domain.measure


def contains(domain, v):
    """Closed-region membership; vectorised over rows of ``v``."""
    return domain.contains(v)


@dataclass(frozen=True, eq=False)
class MarkModel:
    """Marks ``Y = m(X) + sigma(X) xi`` with ``xi`` zero-mean, identity covariance."""

    d2: int
    mean: ParamFunction
    cov: ParamFunction
    noise: str = "gaussian"

    def __post_init__(self):
        if self.d2 < 1:
            raise ModelError("mark dimension d2 must be positive")
        if self.mean.shape != (self.d2,):
            raise ModelError(f"mean must have shape ({self.d2},), got {self.mean.shape}")
        if self.cov.shape != (self.d2, self.d2):
            raise ModelError(f"cov must have shape ({self.d2}, {self.d2}), got {self.cov.shape}")
        if self.mean.dim != self.cov.dim:
            raise ModelError("mean and cov must take points of the same dimension")
        if self.noise not in NOISE_FAMILIES:
            raise ModelError(f"unknown noise family {self.noise!r}")

    @property
    def d1(self) -> int:
        return self.mean.dim

    def breakpoints(self, axis: int) -> np.ndarray:
        return np.union1d(self.mean.breakpoints(axis), self.cov.breakpoints(axis))


def check_cov(cov) -> np.ndarray:
    """Validate symmetry and positive semidefiniteness of (stacked) matrices."""
    cov = np.asarray(cov, dtype=float)
    asym = np.max(np.abs(cov - np.swapaxes(cov, -1, -2)), initial=0.0)
    if asym > SYM_TOL * (1 + np.max(np.abs(cov), initial=0.0)):
        raise ModelError(f"covariance not symmetric (max asymmetry {asym:.3g})")
    lam_min = np.min(np.linalg.eigvalsh(cov), initial=np.inf)
    if lam_min < -PSD_TOL:
        raise ModelError(f"covariance not positive semidefinite (eigenvalue {lam_min:.3g})")
    return cov


def cond_moments(marks: MarkModel, v) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean ``m(v)`` and covariance ``sigma^2(v)`` of a mark at ``v``."""
    return marks.mean(v), check_cov(marks.cov(v))


def factorize(cov) -> np.ndarray:
    """Square-root factor ``L`` with ``L @ L.T == cov``.

    Lower-triangular Cholesky factor for positive definite input; for singular
    input a pivoted factor ``P @ L`` whose trailing columns are zero.
    """
    cov = check_cov(cov)
    if cov.ndim != 2:
        raise ModelError("factorize expects a single square matrix")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    n = cov.shape[0]
    c, piv, rank, info = lapack.dpstrf(cov, lower=1, tol=PSD_TOL)
    if info < 0:
        raise ModelError(f"pivoted Cholesky failed (info={info})")
    L = np.tril(c)
    L[:, rank:] = 0.0
    P = np.zeros((n, n))
    P[piv - 1, np.arange(n)] = 1.0
    return P @ L


def factorize_many(covs) -> np.ndarray:
    """Row-wise :func:`factorize` for a stack ``(n, d2, d2)``."""
    covs = check_cov(covs)
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        return np.stack([factorize(c) for c in covs]) if len(covs) else covs.copy()


@dataclass(frozen=True, eq=False)
class ModelSpec:
    domain: DomainRegion
    marks: MarkModel
    nu: float

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise ModelError(f"intensity nu must be positive, got {self.nu}")
        if self.marks.d1 != self.domain.d1:
            raise ModelError(
                f"mark functions take d1={self.marks.d1} but domain has d1={self.domain.d1}"
            )

    @property
    def d1(self) -> int:
        return self.domain.d1

    @property
    def d2(self) -> int:
        return self.marks.d2

    def with_nu(self, nu: float) -> ModelSpec:
        return ModelSpec(self.domain, self.marks, float(nu))

    def mean_free_of_x2(self) -> bool:
        return self.d1 == 2 and not self.marks.mean.depends_on(1)
