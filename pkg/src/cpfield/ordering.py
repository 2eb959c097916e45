"""Concomitant orderings, partial-sum paths and the corner-indexed mark field."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .families import Rate
from .rng import RngStream
from .sampler import MarkedSample

KINDS = ("coordinate", "time", "intensity")
_FIELD_CHUNK = 2**22


@dataclass(frozen=True)
class OrderingKey:
    """Sort points by a coordinate, by time (first coordinate) or by ``rate(x1)``.

    Ties are always broken by an independent uniform key per point.
    """

    kind: str
    index: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ordering kind {self.kind!r}")

    @property
    def label(self) -> str:
        return f"x{self.index + 1}" if self.kind == "coordinate" else self.kind

    @classmethod
    def coordinate(cls, k: int) -> OrderingKey:
        return cls("coordinate", k)


TIME = OrderingKey("time")
INTENSITY = OrderingKey("intensity")


def tie_keys(sample: MarkedSample, rng: RngStream) -> np.ndarray:
    return rng.child("ties").generator().random(sample.eta)


def key_values(sample: MarkedSample, key: OrderingKey, rate: Rate | None = None) -> np.ndarray:
    if key.kind == "coordinate":
        if not 0 <= key.index < sample.d1:
            raise IndexError(f"coordinate {key.index} out of range for d1={sample.d1}")
        return sample.X[:, key.index]
    if key.kind == "time":
        return sample.X[:, 0]
    if rate is None:
        raise ValueError("intensity ordering needs the rate function of an under-curve domain")
    return rate(sample.X[:, 0])


def order_by_key(
    sample: MarkedSample,
    key: OrderingKey,
    rng: RngStream | None = None,
    *,
    rate: Rate | None = None,
    ties: np.ndarray | None = None,
) -> np.ndarray:
    """Zero-based permutation sorting ``key`` non-decreasingly, ties at random.

    The random tie keys come from ``rng`` (purpose tag ``"ties"``) unless
    passed explicitly via ``ties``.
    """
    keys = key_values(sample, key, rate)
    if ties is None:
        if rng is None:
            raise ValueError("either rng or ties must be given")
        ties = tie_keys(sample, rng)
    return np.lexsort((ties, keys))


def prefix_lengths(eta: int, grid) -> np.ndarray:
    """``[eta * t]`` for each grid value, robust to decimal rounding of ``t``."""
    grid = np.asarray(grid, dtype=float)
    if np.any((grid < 0) | (grid > 1)):
        raise ValueError("grid values must lie in [0, 1]")
    return np.minimum(np.floor(eta * grid + 1e-9).astype(int), eta)


@dataclass(frozen=True, eq=False)
class PartialSumPath:
    """Normalised partial sums on a grid.

    ``values[g, k]`` is the d2-vector for grid point ``g`` and ordering ``k``.
    """

    grid: np.ndarray
    values: np.ndarray
    labels: tuple[str, ...]
    centering: str
    eta: int
    rep_index: int = 0

    @property
    def degenerate(self) -> bool:
        return self.eta == 0


def _centered_marks(sample, centering, mean):
    if centering == "none":
        return sample.Y
    if centering == "per_term_mean":
        if mean is None:
            raise ValueError("per_term_mean centering needs the mark mean function")
        return sample.Y - mean(sample.X) if sample.eta else sample.Y
    raise ValueError(f"unknown centering mode {centering!r}")


def concomitant_partial_sums(
    sample: MarkedSample,
    orderings,
    grid,
    centering: str = "none",
    rng: RngStream | None = None,
    *,
    mean=None,
    rate: Rate | None = None,
    ties: np.ndarray | None = None,
) -> PartialSumPath:
    """Sums of the first ``[eta t]`` concomitants per ordering, divided by ``sqrt(eta)``.

    With ``centering="per_term_mean"`` each term is ``Y_i - m(X_i)``. An empty
    sample yields the identically zero path.
    """
    orderings = list(orderings)
    grid = np.asarray(grid, dtype=float)
    d2 = sample.d2
    eta = sample.eta
    values = np.zeros((len(grid), len(orderings), d2))
    labels = tuple(o.label for o in orderings)
    if eta == 0:
        return PartialSumPath(grid, values, labels, centering, 0, sample.rep_index)
    Y = _centered_marks(sample, centering, mean)
    if ties is None:
        if rng is None:
            raise ValueError("either rng or ties must be given")
        ties = tie_keys(sample, rng)
    k = prefix_lengths(eta, grid)
    scale = 1.0 / np.sqrt(eta)
    for j, key in enumerate(orderings):
        perm = order_by_key(sample, key, rate=rate, ties=ties)
        csum = np.vstack([np.zeros((1, d2)), np.cumsum(Y[perm], axis=0)])
        values[:, j, :] = csum[k] * scale
    return PartialSumPath(grid, values, labels, centering, eta, sample.rep_index)


def theorem3_process(
    sample: MarkedSample, rate: Rate, mean, grid, rng: RngStream | None = None, *, ties=None
) -> PartialSumPath:
    """Time-ordered and intensity-ordered sums of ``Y_i - m(X_i1)``."""
    if sample.d1 != 2:
        raise ValueError("the dual-ordering process needs points in two dimensions")
    return concomitant_partial_sums(
        sample, [TIME, INTENSITY], grid, "per_term_mean", rng,
        mean=mean, rate=rate, ties=ties,
    )


@dataclass(frozen=True, eq=False)
class FieldEvaluation:
    corners: np.ndarray
    values: np.ndarray
    centering: np.ndarray
    eta: int
    rep_index: int = 0

    @property
    def degenerate(self) -> bool:
        return self.eta == 0


def corner_sums(sample: MarkedSample, corners) -> np.ndarray:
    """``sum_j Y_j 1(X_j <= u)`` for each corner ``u`` (rows of ``corners``)."""
    corners = np.atleast_2d(np.asarray(corners, dtype=float))
    if corners.shape[1] != sample.d1:
        raise ValueError("corner dimension does not match the sample")
    out = np.zeros((len(corners), sample.d2))
    if sample.eta == 0:
        return out
    step = max(1, _FIELD_CHUNK // max(1, sample.eta * sample.d1))
    for s in range(0, len(corners), step):
        c = corners[s:s + step]
        below = np.all(sample.X[None, :, :] <= c[:, None, :], axis=2)
        out[s:s + step] = below.astype(float) @ sample.Y
    return out


def evaluate_Q_field(sample: MarkedSample, corners, centering=None) -> FieldEvaluation:
    """``(Q(u) - eta c(u)) / sqrt(eta)`` on a corner grid; zero for an empty sample."""
    corners = np.atleast_2d(np.asarray(corners, dtype=float))
    c = np.zeros((len(corners), sample.d2)) if centering is None else np.asarray(centering, float)
    c = c.reshape(len(corners), sample.d2)
    eta = sample.eta
    if eta == 0:
        vals = np.zeros((len(corners), sample.d2))
    else:
        vals = (corner_sums(sample, corners) - eta * c) / np.sqrt(eta)
    return FieldEvaluation(corners, vals, c, eta, sample.rep_index)


def write_paths_csv(path, paths) -> None:
    """Long format ``rep,ordering,t,component,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "ordering", "t", "component", "value"])
        for p in paths:
            for g, t in enumerate(p.grid):
                for j, lab in enumerate(p.labels):
                    for a in range(p.values.shape[2]):
                        w.writerow([p.rep_index, lab, repr(float(t)), a + 1,
                                    repr(float(p.values[g, j, a]))])


def write_field_csv(path, evals) -> None:
    """Long format ``rep,corner_id,component,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "corner_id", "component", "value"])
        for e in evals:
            for c in range(len(e.corners)):
                for a in range(e.values.shape[1]):
                    w.writerow([e.rep_index, c, a + 1, repr(float(e.values[c, a]))])


def write_grid_json(path, *, grid=None, corners=None, orderings=None) -> None:
    meta = {}
    if grid is not None:
        meta["grid"] = [float(t) for t in grid]
    if corners is not None:
        meta["corners"] = [[float(v) for v in c] for c in np.atleast_2d(corners)]
    if orderings is not None:
        meta["orderings"] = list(orderings)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
