"""Limit covariances of the normalised field and of the ordered partial-sum processes.

Every covariance is an integral of the conditional mark moments against the
uniform density ``1/mu(A)`` over a region cut out of ``A`` by thresholds:

* field at corners ``u1, u2``: ``A ∩ {v <= u1, v <= u2}``;
* coordinate orderings ``i, j``: ``A ∩ {v_i <= s1, v_j <= s2}``;
* time / intensity orderings on an under-curve domain: time thresholds on
  ``x1`` and (randomised) intensity-rank thresholds on ``rate(x1)``.

In ``quantile_normalized`` mode the process index ``t`` (fraction of ordered
points) is mapped to the ``t``-quantile of the ordering key, with ties of the
intensity key resolved by the randomised probability-integral transform
``F(L-) + U (F(L) - F(L-))``. ``paper_literal`` mode uses the raw threshold
regions with ``t`` read directly as a coordinate value.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .families import Rate
from .integrate import DEFAULT_TOL, Integral, IntegrationRegion, integrate, roundoff
from .model import Box, Indicator, ModelSpec, UnderCurve

MODES = ("paper_literal", "quantile_normalized")
QUANTILE_XTOL = 1e-10
# region masses behind a quantile are resolved an order below the covariance tolerance
QUANTILE_TOL = 0.1 * DEFAULT_TOL


class AtomicIntensityWarning(UserWarning):
    """Literal threshold regions used with an intensity distribution that has atoms."""


# -- quantile functions ----------------------------------------------------


def _check_t(t):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"index t must lie in [0, 1], got {t}")
    return t


def time_quantile(rate: Rate, t: float) -> float:
    """``inf{s : Lambda(s) / Lambda(T) >= t}``."""
    t = _check_t(t)
    if t == 0.0:
        return 0.0
    if t == 1.0:
        return rate.T
    target = t * rate.total
    return float(optimize.brentq(
        lambda s: float(rate.cumulative(s)) - target, 0.0, rate.T,
        xtol=QUANTILE_XTOL, rtol=4 * np.finfo(float).eps,
    ))


def intensity_threshold(rate: Rate, t: float) -> float:
    """``inf{l : P(rate(X1) <= l) >= t}`` with ``X1`` of density ``rate / Lambda(T)``.

    For ``t = 0`` the infimum is unbounded below; the rate minimum is returned.
    """
    t = _check_t(t)
    lo, hi = rate.bounds
    if t == 0.0:
        return lo
    if rate.has_atoms:
        levels, probs = rate.atoms()
        cum = np.cumsum(probs)
        return float(levels[np.searchsorted(cum, t - 1e-12)])
    if t == 1.0:
        return hi
    return float(optimize.brentq(
        lambda l: rate.level_mass(l) / rate.total - t, lo, hi,
        xtol=QUANTILE_XTOL, rtol=4 * np.finfo(float).eps,
    ))


def marginal_quantile(domain, axis: int, t: float) -> float:
    """``t``-quantile of coordinate ``axis`` of a uniform point in ``domain``."""
    t = _check_t(t)
    lo, hi = domain.lower[axis], domain.upper[axis]
    if isinstance(domain, Box):
        return lo + t * (hi - lo)
    if isinstance(domain, UnderCurve) and axis == 0:
        return time_quantile(domain.rate, t)
    if t == 0.0:
        return lo
    if t == 1.0:
        return hi
    mu = domain.measure

    def cdf(s):
        upper = np.full(domain.d1, np.inf)
        upper[axis] = s
        reg = IntegrationRegion(domain, upper=upper, breaks=_domain_breaks(domain))
        res = integrate(lambda x: np.ones(len(x)), reg, tol=QUANTILE_TOL * mu, cross_check=False)
        return float(res.value) / mu - t

    return float(optimize.brentq(cdf, lo, hi, xtol=QUANTILE_XTOL))


# -- covariance blocks -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class CovarianceBlock:
    """Oracle covariances ``values[a, b]`` between grid arguments ``a`` and ``b``.

    Each ``values[a, b]`` is ``p x p`` where the ``p`` components stack
    ``len(groups)`` blocks of the mark dimension ``d2`` (one per ordering, or a
    single block for the field).
    """

    kind: str
    mode: str
    args: tuple
    groups: tuple[str, ...]
    d2: int
    values: np.ndarray
    err: np.ndarray
    qmc_values: np.ndarray
    qmc_err: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.groups) * self.d2

    def gram(self) -> np.ndarray:
        n, p = len(self.args), self.p
        return self.values.transpose(0, 2, 1, 3).reshape(n * p, n * p)

    def min_eigenvalue(self) -> float:
        g = self.gram()
        return float(np.linalg.eigvalsh(0.5 * (g + g.T)).min())

    def agreement_gap(self) -> np.ndarray:
        """``|midpoint - qmc| / (err + qmc_err)``, entrywise, with a roundoff floor."""
        gap = np.abs(self.values - self.qmc_values)
        return gap / (self.err + self.qmc_err + roundoff(self.values))

    def estimates_agree(self, factor: float = 3.0) -> bool:
        return bool(np.all(self.agreement_gap() <= factor))

    def shifted(self, offset: float) -> CovarianceBlock:
        """A copy with ``offset`` added to every value (used to inject faults)."""
        return CovarianceBlock(
            self.kind, self.mode, self.args, self.groups, self.d2,
            self.values + offset, self.err, self.qmc_values + offset, self.qmc_err, self.meta,
        )

    def arg_label(self, a: int) -> str:
        x = self.args[a]
        if np.ndim(x) == 0:
            return repr(float(x))
        return ":".join(repr(float(v)) for v in x)

    def rows(self):
        """Long-format rows ``(block, t1, t2, row, col, value, err_estimate)``."""
        d2 = self.d2
        out = []
        for a in range(len(self.args)):
            for b in range(len(self.args)):
                for gi, g1 in enumerate(self.groups):
                    for gj, g2 in enumerate(self.groups):
                        label = "K" if self.kind == "theorem1" else f"{g1}{g2}"
                        for r in range(d2):
                            for c in range(d2):
                                i, j = gi * d2 + r, gj * d2 + c
                                out.append((
                                    label, self.arg_label(a), self.arg_label(b), r + 1, c + 1,
                                    float(self.values[a, b, i, j]), float(self.err[a, b, i, j]),
                                ))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block", "t1", "t2", "row", "col", "value", "err_estimate"])
            for row in self.rows():
                w.writerow(list(row[:5]) + [repr(row[5]), repr(row[6])])

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "args": [self.arg_label(a) for a in range(len(self.args))],
            "groups": list(self.groups),
            "d2": self.d2,
            "min_eigenvalue": self.min_eigenvalue(),
            "max_agreement_ratio": float(np.max(self.agreement_gap(), initial=0.0)),
            **self.meta,
        }

    def write_metadata(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- integration helpers ---------------------------------------------------


def _domain_breaks(domain) -> dict:
    if isinstance(domain, UnderCurve):
        return {0: domain.rate.breaks}
    if isinstance(domain, Indicator):
        return domain.breaks()
    return {}


def _base_breaks(spec: ModelSpec) -> dict:
    out = dict(_domain_breaks(spec.domain))
    for axis in range(spec.d1):
        b = spec.marks.breakpoints(axis)
        if len(b):
            out[axis] = np.union1d(out.get(axis, np.empty(0)), b)
    return out


def _merge_breaks(base: dict, axis: int, extra) -> dict:
    out = dict(base)
    out[axis] = np.union1d(out.get(axis, np.empty(0)), np.asarray(extra, dtype=float))
    return out


def _sigma2(spec: ModelSpec):
    mu = spec.domain.measure
    cov = spec.marks.cov
    return lambda x: cov(x) / mu


def _integrate(f, region, tol):
    return integrate(f, region, tol=tol)


def _scaled(res: Integral, sign: float = 1.0) -> Integral:
    return Integral(sign * res.value, res.err, sign * res.qmc_value, res.qmc_err, res.level)


# -- field covariance ------------------------------------------------------


def _centering_integral(spec: ModelSpec, u, tol) -> Integral:
    u = np.asarray(u, dtype=float).reshape(spec.d1)
    mu = spec.domain.measure
    mean = spec.marks.mean
    region = IntegrationRegion(spec.domain, upper=u, breaks=_base_breaks(spec))
    return _integrate(lambda x: mean(x) / mu, region, tol)


def centering(spec: ModelSpec, u, *, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``c(u) = E[Y 1(X <= u)] = (1/mu(A)) int_{A, v <= u} m(v) dv``."""
    if spec.marks.mean.is_zero():
        return np.zeros(spec.d2)
    return _centering_integral(spec, u, tol).value


def _zero_integral(shape) -> Integral:
    z = np.zeros(shape)
    return Integral(z, z, z, z, 0)


def _theorem1(spec, u1, u2, tol, cache) -> Integral:
    u1 = np.asarray(u1, dtype=float).reshape(spec.d1)
    u2 = np.asarray(u2, dtype=float).reshape(spec.d1)
    mu = spec.domain.measure
    mean, cov = spec.marks.mean, spec.marks.cov
    region = IntegrationRegion(spec.domain, upper=np.minimum(u1, u2), breaks=_base_breaks(spec))
    if mean.is_zero():
        return _integrate(lambda x: cov(x) / mu, region, tol)

    def second_moment(x):
        m = mean(x)
        return (cov(x) + m[:, :, None] * m[:, None, :]) / mu

    first = _integrate(second_moment, region, tol)

    def cent(u):
        key = tuple(u)
        if key not in cache:
            cache[key] = _centering_integral(spec, u, tol)
        return cache[key]

    c1, c2 = cent(u1), cent(u2)
    outer = np.outer(c1.value, c2.value)
    q_outer = np.outer(c1.qmc_value, c2.qmc_value)
    err = first.err + np.outer(np.abs(c1.value), c2.err) + np.outer(c1.err, np.abs(c2.value)) \
        + np.outer(c1.err, c2.err)
    qerr = first.qmc_err + np.outer(np.abs(c1.qmc_value), c2.qmc_err) \
        + np.outer(c1.qmc_err, np.abs(c2.qmc_value)) + np.outer(c1.qmc_err, c2.qmc_err)
    return Integral(first.value - outer, err, first.qmc_value - q_outer, qerr,
                    max(first.level, c1.level, c2.level))


def cov_theorem1(spec: ModelSpec, u1, u2, *, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Limit covariance ``E Q(u1)^T Q(u2)`` of the normalised field.

    ``(1/mu) int_{A ∧} (sigma^2 + m m^T) - c(u1) c(u2)^T`` with
    ``A ∧ = A ∩ {v <= u1, v <= u2}``.
    """
    return _theorem1(spec, u1, u2, tol, {}).value


def theorem1_block(spec: ModelSpec, corners, *, tol: float = DEFAULT_TOL) -> CovarianceBlock:
    corners = [tuple(float(v) for v in c) for c in np.atleast_2d(np.asarray(corners, float))]
    n, d2 = len(corners), spec.d2
    vals = np.zeros((4, n, n, d2, d2))
    cache: dict = {}
    for a in range(n):
        for b in range(a, n):
            res = _theorem1(spec, corners[a], corners[b], tol, cache)
            parts = (res.value, res.err, res.qmc_value, res.qmc_err)
            for k, part in enumerate(parts):
                vals[k, a, b] = part
                vals[k, b, a] = part.T
    return CovarianceBlock("theorem1", "density_normalized", tuple(corners), ("Q",), d2,
                           *vals, meta={"tol": tol})


# -- coordinate orderings --------------------------------------------------


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def _theorem2(spec, i, s1, j, s2, tol) -> Integral:
    upper = np.full(spec.d1, np.inf)
    upper[i] = s1
    upper[j] = min(upper[j], s2)
    region = IntegrationRegion(spec.domain, upper=upper, breaks=_base_breaks(spec))
    return _integrate(_sigma2(spec), region, tol)


def _require_zero_mean(spec):
    if not spec.marks.mean.is_zero():
        raise ValueError("coordinate-ordering covariances require a zero mark mean")


def _threshold2(spec, axis, t, mode):
    if mode == "paper_literal":
        return float(t)
    return marginal_quantile(spec.domain, axis, t)


def cov_theorem2(
    spec: ModelSpec, i: int, t1: float, j: int, t2: float,
    mode: str = "quantile_normalized", *, tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """Cross-covariance of the coordinate-``i`` and coordinate-``j`` ordered sums.

    Coordinates are zero-based. In ``quantile_normalized`` mode ``t1, t2`` are
    point fractions; in ``paper_literal`` mode they are raw coordinate thresholds.
    """
    _check_mode(mode)
    _require_zero_mean(spec)
    for k in (i, j):
        if not 0 <= k < spec.d1:
            raise IndexError(f"coordinate {k} out of range for d1={spec.d1}")
    s1 = _threshold2(spec, i, t1, mode)
    s2 = _threshold2(spec, j, t2, mode)
    return _theorem2(spec, i, s1, j, s2, tol).value


def theorem2_block(
    spec: ModelSpec, grid, mode: str = "quantile_normalized", *, tol: float = DEFAULT_TOL
) -> CovarianceBlock:
    _check_mode(mode)
    _require_zero_mean(spec)
    grid = tuple(float(t) for t in grid)
    n, d1, d2 = len(grid), spec.d1, spec.d2
    thr = {(k, a): _threshold2(spec, k, grid[a], mode) for k in range(d1) for a in range(n)}
    p = d1 * d2
    vals = np.zeros((4, n, n, p, p))
    cache = {}
    for a in range(n):
        for b in range(n):
            for k in range(d1):
                for l in range(d1):
                    s1, s2 = thr[k, a], thr[l, b]
                    key = frozenset({(k, s1), (l, s2)}) if k != l else (k, min(s1, s2))
                    if key not in cache:
                        cache[key] = _theorem2(spec, k, s1, l, s2, tol)
                    res = cache[key]
                    sl = (slice(k * d2, (k + 1) * d2), slice(l * d2, (l + 1) * d2))
                    for q, part in enumerate((res.value, res.err, res.qmc_value, res.qmc_err)):
                        vals[q, a, b][sl] = part
    groups = tuple(str(k + 1) for k in range(d1))
    meta = {"tol": tol, "thresholds": {f"{k + 1}@{grid[a]!r}": v for (k, a), v in thr.items()}}
    return CovarianceBlock("theorem2", mode, grid, groups, d2, *vals, meta=meta)


# -- time / intensity orderings --------------------------------------------


def _require_under_curve(spec):
    if not isinstance(spec.domain, UnderCurve):
        raise ValueError("time/intensity orderings need an under_curve domain")
    if not spec.mean_free_of_x2():
        raise ValueError("the mark mean must not depend on x2 for time/intensity orderings")


def _rank_weight(rate: Rate, t: float):
    """Probability that a point at ``x1`` falls among the lowest fraction ``t``
    of the randomised intensity ordering, plus its auxiliary-uniform form."""
    if rate.has_atoms:
        levels, probs = rate.atoms()
        f_lo = np.cumsum(probs) - probs

        def atom(x):
            return np.searchsorted(levels, rate(x[:, 0]))

        def weight(x):
            k = atom(x)
            return np.clip((t - f_lo[k]) / probs[k], 0.0, 1.0)

        def qmc_weight(x, u):
            k = atom(x)
            return (f_lo[k] + u * probs[k] <= t).astype(float)

        return weight, qmc_weight, np.empty(0)
    if t <= 0.0:
        return (lambda x: np.zeros(len(x))), None, np.empty(0)
    level = intensity_threshold(rate, t)
    return _level_weight(rate, level)


def _level_weight(rate: Rate, level: float):
    def weight(x):
        return (rate(x[:, 0]) <= level).astype(float)

    return weight, None, rate.level_crossings(level)


def _theorem3_region(spec, block, t1, t2, mode):
    rate = spec.domain.rate
    base = _base_breaks(spec)
    inf = np.inf
    if mode == "quantile_normalized":
        if block == "11":
            return IntegrationRegion(spec.domain, upper=np.array([time_quantile(rate, min(t1, t2)), inf]),
                                     breaks=base)
        if block == "12":
            w, qw, br = _rank_weight(rate, t2)
            return IntegrationRegion(spec.domain, upper=np.array([time_quantile(rate, t1), inf]),
                                     weight=w, qmc_weight=qw, breaks=_merge_breaks(base, 0, br))
        w, qw, br = _rank_weight(rate, min(t1, t2))
        return IntegrationRegion(spec.domain, weight=w, qmc_weight=qw,
                                 breaks=_merge_breaks(base, 0, br))
    # literal threshold sets with t1, t2 read as times
    if block == "11":
        return IntegrationRegion(spec.domain, upper=np.array([min(t1, t2), inf]), breaks=base)
    if block == "12":
        w, _, br = _level_weight(rate, float(rate(t2)))
        return IntegrationRegion(spec.domain, upper=np.array([t1, inf]), weight=w,
                                 breaks=_merge_breaks(base, 0, br))
    w, _, br = _level_weight(rate, float(min(rate(t1), rate(t2))))
    return IntegrationRegion(spec.domain, weight=w, breaks=_merge_breaks(base, 0, br))


def _check_t3(spec, t, mode):
    if mode == "quantile_normalized":
        return _check_t(t)
    t = float(t)
    if not 0.0 <= t <= spec.domain.T:
        raise ValueError(f"time argument must lie in [0, T={spec.domain.T}], got {t}")
    return t


def _warn_atoms(spec, mode):
    if mode == "paper_literal" and spec.domain.rate.has_atoms:
        warnings.warn(
            "paper_literal threshold regions ignore the random order of tied "
            "intensities; the intensity distribution here has atoms",
            AtomicIntensityWarning,
            stacklevel=3,
        )


def _theorem3(spec, block, t1, t2, mode, tol) -> Integral:
    if block == "21":
        res = _theorem3(spec, "12", t2, t1, mode, tol)
        return Integral(res.value.T, res.err.T, res.qmc_value.T, res.qmc_err.T, res.level)
    if block not in ("11", "12", "22"):
        raise ValueError(f"unknown block {block!r}")
    region = _theorem3_region(spec, block, t1, t2, mode)
    return _integrate(_sigma2(spec), region, tol)


def cov_theorem3(
    spec: ModelSpec, block: str, t1: float, t2: float,
    mode: str = "quantile_normalized", *, tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """Covariance block ``11`` (time/time), ``12`` (time/intensity), ``21`` or
    ``22`` (intensity/intensity) of the dual-ordering process."""
    _check_mode(mode)
    _require_under_curve(spec)
    t1, t2 = _check_t3(spec, t1, mode), _check_t3(spec, t2, mode)
    _warn_atoms(spec, mode)
    return _theorem3(spec, block, t1, t2, mode, tol).value


def theorem3_block(
    spec: ModelSpec, grid, mode: str = "quantile_normalized", *, tol: float = DEFAULT_TOL
) -> CovarianceBlock:
    _check_mode(mode)
    _require_under_curve(spec)
    grid = tuple(_check_t3(spec, t, mode) for t in grid)
    _warn_atoms(spec, mode)
    n, d2 = len(grid), spec.d2
    vals = np.zeros((4, n, n, 2 * d2, 2 * d2))
    sym = {}
    cross = {}
    for a in range(n):
        for b in range(n):
            for blk in ("11", "22"):
                key = (blk, min(a, b), max(a, b))
                if key not in sym:
                    sym[key] = _theorem3(spec, blk, grid[a], grid[b], mode, tol)
            if (a, b) not in cross:
                cross[a, b] = _theorem3(spec, "12", grid[a], grid[b], mode, tol)
    d = slice(0, d2), slice(d2, 2 * d2)
    for a in range(n):
        for b in range(n):
            lo, hi = min(a, b), max(a, b)
            pieces = {
                (0, 0): sym["11", lo, hi],
                (1, 1): sym["22", lo, hi],
                (0, 1): cross[a, b],
            }
            r21 = cross[b, a]
            pieces[(1, 0)] = Integral(r21.value.T, r21.err.T, r21.qmc_value.T, r21.qmc_err.T,
                                      r21.level)
            for (g1, g2), res in pieces.items():
                for q, part in enumerate((res.value, res.err, res.qmc_value, res.qmc_err)):
                    vals[q, a, b][d[g1], d[g2]] = part
    meta = {"tol": tol, "atomic_intensity": bool(spec.domain.rate.has_atoms)}
    return CovarianceBlock("theorem3", mode, grid, ("1", "2"), d2, *vals, meta=meta)


def oracle_block(spec: ModelSpec, target, mode: str = "quantile_normalized",
                 *, tol: float = DEFAULT_TOL) -> CovarianceBlock:
    """Dispatch on a :class:`cpfield.verify.Target`."""
    if target.kind == "theorem1":
        return theorem1_block(spec, target.args, tol=tol)
    if target.kind == "theorem2":
        return theorem2_block(spec, target.args, mode, tol=tol)
    if target.kind == "theorem3":
        return theorem3_block(spec, target.args, mode, tol=tol)
    raise ValueError(f"unknown target kind {target.kind!r}")
