"""Realisations of compound Poisson fields and inhomogeneous Poisson times."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .families import Rate
from .model import Box, MarkModel, ModelSpec, factorize_many
from .rng import RngStream

MIN_ACCEPTANCE = 1e-6
_BATCH_MIN = 1024


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MarkedSample:
    """One realisation: ``eta`` points ``X`` (eta x d1) with marks ``Y`` (eta x d2)."""

    X: np.ndarray
    Y: np.ndarray
    seed: int = 0
    rep_index: int = 0

    def __post_init__(self):
        if len(self.X) != len(self.Y):
            raise ValueError("X and Y must have the same number of rows")
        self.X.setflags(write=False)
        self.Y.setflags(write=False)

    @property
    def eta(self) -> int:
        return len(self.X)

    @property
    def d1(self) -> int:
        return self.X.shape[1]

    @property
    def d2(self) -> int:
        return self.Y.shape[1]


def sample_count(nu: float, vol: float, rng: RngStream) -> int:
    if not nu > 0:
        raise ValueError(f"intensity must be positive, got {nu}")
    if not vol > 0:
        raise ValueError(f"volume must be positive, got {vol}")
    return int(rng.generator().poisson(nu * vol))


def _rejection(domain, n, gen, accept_hint):
    lo = np.asarray(domain.lower)
    hi = np.asarray(domain.upper)
    out = []
    have = 0
    proposed = 0
    while have < n:
        need = n - have
        batch = max(_BATCH_MIN, int(1.2 * need / accept_hint) + 16)
        cand = lo + gen.random((batch, len(lo))) * (hi - lo)
        mask = domain.contains(cand)
        keep = cand[mask]
        # only count proposals up to the one that completed the sample
        if len(keep) >= need:
            last = np.flatnonzero(mask)[need - 1]
            proposed += last + 1
            keep = keep[:need]
        else:
            proposed += batch
        out.append(keep)
        have += len(keep)
    return np.concatenate(out) if out else np.empty((0, len(lo))), proposed


def sample_points(domain, n: int, rng: RngStream, *, return_acceptance: bool = False):
    """``n`` iid uniform points in ``domain``.

    Boxes are sampled directly, other regions by rejection from the bounding
    box. With ``return_acceptance`` the observed acceptance rate is returned too.
    """
    if n < 0:
        raise ValueError("number of points must be non-negative")
    gen = rng.generator()
    d1 = domain.d1
    if isinstance(domain, Box):
        lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
        pts = lo + gen.random((n, d1)) * (hi - lo)
        return (pts, 1.0) if return_acceptance else pts
    accept = domain.measure / domain.box_volume
    if accept < MIN_ACCEPTANCE:
        raise SamplingError(
            f"rejection acceptance probability {accept:.3g} is below {MIN_ACCEPTANCE}; "
            "the region is degenerate relative to its bounding box"
        )
    if n == 0:
        pts, proposed = np.empty((0, d1)), 0
    else:
        pts, proposed = _rejection(domain, n, gen, accept)
    if return_acceptance:
        return pts, (n / proposed if proposed else float("nan"))
    return pts


_NOISE = {
    "gaussian": lambda g, size: g.standard_normal(size),
    "rademacher": lambda g, size: 2.0 * g.integers(0, 2, size=size) - 1.0,
    "uniform": lambda g, size: g.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=size),
}


def sample_marks(marks: MarkModel, X, rng: RngStream) -> np.ndarray:
    """``Y_i = m(X_i) + sigma(X_i) xi_i`` row by row."""
    X = np.asarray(X, dtype=float).reshape(-1, marks.d1)
    n = len(X)
    mean = marks.mean(X)
    if n == 0:
        return np.empty((0, marks.d2))
    if marks.cov.is_zero():
        return mean
    xi = _NOISE[marks.noise](rng.generator(), (n, marks.d2))
    if marks.cov.family == "constant":
        L = factorize_many(marks.cov.value[None])[0]
        return mean + xi @ L.T
    L = factorize_many(marks.cov(X))
    return mean + np.einsum("nij,nj->ni", L, xi)


def sample_field(spec: ModelSpec, rng: RngStream) -> MarkedSample:
    """A compound Poisson field realisation, determined by ``rng``'s (seed, path)."""
    eta = sample_count(spec.nu, spec.domain.measure, rng.child("count"))
    X = sample_points(spec.domain, eta, rng.child("points"))
    Y = sample_marks(spec.marks, X, rng.child("marks"))
    return MarkedSample(X, Y, seed=rng.seed, rep_index=rng.rep_index)


def sample_inhomogeneous_times(
    rate: Rate, T: float, nu: float, rng: RngStream, lambda_max: float | None = None
) -> np.ndarray:
    """Ascending arrival times on ``[0, T]`` with intensity ``nu * rate(t)``.

    Generated by thinning a homogeneous process of intensity
    ``nu * lambda_max``.
    """
    if not nu > 0:
        raise ValueError(f"intensity must be positive, got {nu}")
    if abs(T - rate.T) > 1e-12 * max(1.0, T):
        raise ValueError(f"horizon {T} does not match the rate's horizon {rate.T}")
    sup = rate.bounds[1]
    if lambda_max is None:
        lambda_max = sup
    if lambda_max < sup * (1 - 1e-12):
        raise ValueError(f"lambda_max {lambda_max} is below the rate supremum {sup}")
    gen = rng.generator()
    n = gen.poisson(nu * lambda_max * T)
    cand = np.sort(gen.random(n) * T)
    lam = rate(cand)
    if np.any(lam > lambda_max):
        raise ValueError(f"observed rate {lam.max()} exceeds lambda_max {lambda_max}")
    keep = gen.random(n) * lambda_max < lam
    return cand[keep]


def lift_times_to_field(times, rate: Rate, rng: RngStream) -> np.ndarray:
    """Map each time ``s`` to the point ``(s, U * rate(s))``, U ~ Uniform(0, 1)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    u = rng.generator().random(len(times))
    return np.column_stack([times, u * rate(times)])


def project_field_to_times(points) -> np.ndarray:
    """Sorted first coordinates of a two-dimensional point set."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return np.empty(0)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("projection expects points in two dimensions")
    return np.sort(points[:, 0])


def write_samples_csv(path, samples) -> None:
    """Write samples as ``rep,i,x1..x{d1},y1..y{d2}``, one row per point."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to write")
    d1, d2 = samples[0].d1, samples[0].d2
    header = ["rep", "i"] + [f"x{k + 1}" for k in range(d1)] + [f"y{k + 1}" for k in range(d2)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in samples:
            for i in range(s.eta):
                w.writerow(
                    [s.rep_index, i]
                    + [repr(float(v)) for v in s.X[i]]
                    + [repr(float(v)) for v in s.Y[i]]
                )
