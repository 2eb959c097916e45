"""Monte Carlo replication harness: empirical covariances, oracle comparison, normality."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import oracle as _oracle
from .model import ModelSpec
from .ordering import (
    OrderingKey,
    concomitant_partial_sums,
    evaluate_Q_field,
    theorem3_process,
)
from .rng import RngStream
from .sampler import sample_field

TARGETS = ("theorem1", "theorem2", "theorem3")
SE_FACTOR = 4.0
KS_CRITICAL = {0.10: 1.22, 0.05: 1.36, 0.01: 1.63}


@dataclass(frozen=True)
class Target:
    """Which normalised statistic to replicate and on which grid.

    ``theorem1``: the field at corner points ``args`` (rows of length d1);
    ``theorem2``: coordinate-ordered concomitant sums at fractions ``args``;
    ``theorem3``: time- and intensity-ordered centred sums at fractions ``args``.
    """

    kind: str
    args: tuple

    def __post_init__(self):
        if self.kind not in TARGETS:
            raise ValueError(f"unknown target {self.kind!r}; expected one of {TARGETS}")
        if len(self.args) == 0:
            raise ValueError("target grid must not be empty")
        if self.kind == "theorem1":
            args = tuple(tuple(float(v) for v in np.atleast_1d(a)) for a in self.args)
        else:
            args = tuple(float(t) for t in self.args)
            if any(not 0.0 <= t <= 1.0 for t in args):
                raise ValueError("process grid values must lie in [0, 1]")
        object.__setattr__(self, "args", args)

    @classmethod
    def corners_from_axes(cls, axis_values, d1: int) -> Target:
        """Product grid of ``axis_values`` in every coordinate."""
        axis_values = [float(v) for v in axis_values]
        mesh = np.array(np.meshgrid(*[axis_values] * d1, indexing="ij")).reshape(d1, -1).T
        return cls("theorem1", tuple(map(tuple, mesh)))


@dataclass(frozen=True, eq=False)
class ReplicationBatch:
    target: Target
    stats: np.ndarray
    degenerate: np.ndarray
    seed: int
    nu: float
    records: tuple = ()

    @property
    def R(self) -> int:
        return len(self.stats)

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate.sum())

    @property
    def valid(self) -> np.ndarray:
        return self.stats[~self.degenerate]


def _statistic(spec: ModelSpec, target: Target, centering):
    if target.kind == "theorem1":
        def stat(sample, stream):
            rec = evaluate_Q_field(sample, np.array(target.args), centering)
            return rec.values, rec
    elif target.kind == "theorem2":
        keys = [OrderingKey.coordinate(k) for k in range(spec.d1)]

        def stat(sample, stream):
            rec = concomitant_partial_sums(sample, keys, target.args, "none", stream)
            return rec.values.reshape(len(target.args), -1), rec
    else:
        rate, mean = spec.domain.rate, spec.marks.mean

        def stat(sample, stream):
            rec = theorem3_process(sample, rate, mean, target.args, stream)
            return rec.values.reshape(len(target.args), -1), rec
    return stat


def _check_target(spec: ModelSpec, target: Target):
    if target.kind == "theorem1":
        if any(len(a) != spec.d1 for a in target.args):
            raise ValueError(f"corners must have dimension d1={spec.d1}")
    elif target.kind == "theorem2":
        _oracle._require_zero_mean(spec)
    else:
        _oracle._require_under_curve(spec)


def run_replications(
    spec: ModelSpec,
    target: Target,
    R: int,
    seed: int,
    *,
    threads: int = 1,
    keep_records: bool = False,
) -> ReplicationBatch:
    """``R`` independent replications of the target statistic.

    Replication ``r`` draws from stream ``(seed, (r,))`` only, so the batch is
    identical for any thread count.
    """
    if R < 2:
        raise ValueError(f"need at least 2 replications, got {R}")
    _check_target(spec, target)
    centering = None
    if target.kind == "theorem1":
        centering = np.array([_oracle.centering(spec, u) for u in target.args])
    stat = _statistic(spec, target, centering)
    root = RngStream(seed)

    def one(r):
        stream = root.spawn(r)
        sample = sample_field(spec, stream)
        values, rec = stat(sample, stream)
        return values, sample.eta == 0, rec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]
    values = np.stack([v for v, _, _ in results])
    degenerate = np.array([d for _, d, _ in results])
    records = tuple(rec for _, _, rec in results) if keep_records else ()
    return ReplicationBatch(target, values, degenerate, seed, spec.nu, records)


def _centered(batch: ReplicationBatch) -> np.ndarray:
    x = batch.valid
    if len(x) < 2:
        raise ValueError("fewer than two non-degenerate replications")
    x = x.reshape(len(x), -1)
    return x - x.mean(axis=0)


def covariance_with_se(batch: ReplicationBatch) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased covariance of all (argument, component) pairs and per-entry SEs.

    Both arrays have shape ``(n, n, p, p)``. The SE of an entry is the sample
    standard deviation of the centred products divided by ``sqrt(R)``.
    """
    c = _centered(batch)
    R = len(c)
    n = len(batch.target.args)
    p = c.shape[1] // n
    cov = c.T @ c / (R - 1)
    sq = (c * c).T @ (c * c)
    mean_prod = c.T @ c / R
    var_prod = np.maximum(sq - R * mean_prod**2, 0.0) / (R - 1)
    se = np.sqrt(var_prod / R)
    shape = (n, p, n, p)
    return (cov.reshape(shape).transpose(0, 2, 1, 3),
            se.reshape(shape).transpose(0, 2, 1, 3))


def empirical_covariance(batch: ReplicationBatch, a: int, b: int) -> np.ndarray:
    """Cross-covariance matrix between grid arguments ``a`` and ``b``."""
    c = _centered(batch)
    n = len(batch.target.args)
    c = c.reshape(len(c), n, -1)
    return c[:, a, :].T @ c[:, b, :] / (len(c) - 1)


@dataclass(frozen=True)
class KSResult:
    arg: int
    direction: tuple
    distance: float
    critical: float
    alpha: float
    reject: bool


def ks_critical(alpha: float, R: int) -> float:
    c = KS_CRITICAL.get(alpha)
    if c is None:
        c = float(np.sqrt(-0.5 * np.log(alpha / 2.0)))
    return c / np.sqrt(R)


def ks_normality(
    batch: ReplicationBatch, arg: int, direction, block, alpha: float = 0.01
) -> KSResult:
    """KS distance of an oracle-standardised linear projection from N(0, 1)."""
    d = np.asarray(direction, dtype=float).reshape(-1)
    var = float(d @ block.values[arg, arg] @ d)
    if not var > 0:
        raise ValueError("projection has zero oracle variance")
    z = batch.valid[:, arg, :] @ d / np.sqrt(var)
    dist = float(stats.kstest(z, "norm").statistic)
    crit = ks_critical(alpha, len(z))
    return KSResult(arg, tuple(d.tolist()), dist, float(crit), alpha, bool(dist > crit))


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    empirical: np.ndarray
    oracle: np.ndarray
    se: np.ndarray
    tol: float
    n_reps: int
    n_degenerate: int
    target: Target
    ks: tuple = field(default_factory=tuple)

    @property
    def deviation(self) -> np.ndarray:
        return self.empirical - self.oracle

    @property
    def max_abs_dev(self) -> float:
        return float(np.max(np.abs(self.deviation)))

    @property
    def max_rel_dev(self) -> float:
        nz = np.abs(self.oracle) > 1e-12
        if not nz.any():
            return 0.0
        return float(np.max(np.abs(self.deviation[nz]) / np.abs(self.oracle[nz])))

    @property
    def threshold(self) -> np.ndarray:
        return self.tol + SE_FACTOR * self.se

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.deviation) <= self.threshold))

    @property
    def worst(self) -> tuple:
        """Index of the entry with the largest deviation-to-threshold ratio."""
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(self.deviation) / self.threshold
        ratio = np.where(np.isnan(ratio), 0.0, ratio)
        return np.unravel_index(int(np.argmax(ratio)), ratio.shape)

    @property
    def max_se(self) -> float:
        return float(self.se.max())

    def summary(self) -> dict:
        w = self.worst
        return {
            "target": self.target.kind,
            "n_reps": self.n_reps,
            "n_degenerate": self.n_degenerate,
            "tol": self.tol,
            "max_abs_dev": self.max_abs_dev,
            "max_rel_dev": self.max_rel_dev,
            "max_se": self.max_se,
            "worst_entry": [int(i) for i in w],
            "worst_dev": float(self.deviation[w]),
            "worst_se": float(self.se[w]),
            "passed": self.passed,
        }

    def to_dict(self) -> dict:
        n, _, p, _ = self.empirical.shape
        entries = []
        for a in range(n):
            for b in range(n):
                for i in range(p):
                    for j in range(p):
                        idx = (a, b, i, j)
                        entries.append({
                            "a": a, "b": b, "i": i, "j": j,
                            "empirical": float(self.empirical[idx]),
                            "oracle": float(self.oracle[idx]),
                            "se": float(self.se[idx]),
                        })
        return {
            "summary": self.summary(),
            "args": [list(a) if isinstance(a, tuple) else a for a in self.target.args],
            "entries": entries,
            "ks": [
                {"arg": k.arg, "direction": list(k.direction), "distance": k.distance,
                 "critical": k.critical, "alpha": k.alpha, "reject": k.reject}
                for k in self.ks
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Per-entry comparison table."""
        n, _, p, _ = self.empirical.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "b", "row", "col", "empirical", "oracle", "deviation", "se",
                        "threshold", "pass"])
            thr = self.threshold
            for a in range(n):
                for b in range(n):
                    for i in range(p):
                        for j in range(p):
                            idx = (a, b, i, j)
                            dev = self.deviation[idx]
                            w.writerow([a, b, i + 1, j + 1, repr(float(self.empirical[idx])),
                                        repr(float(self.oracle[idx])), repr(float(dev)),
                                        repr(float(self.se[idx])), repr(float(thr[idx])),
                                        int(abs(dev) <= thr[idx])])


def compare_to_oracle(
    batch: ReplicationBatch, block, tol: float, *, ks_alpha: float | None = None
) -> ComparisonReport:
    """Entrywise comparison; passes iff every ``|dev| <= tol + 4 SE``.

    With ``ks_alpha`` set, every unit projection with positive oracle variance
    is also KS-tested against normality (reported, not part of ``passed``).
    """
    emp, se = covariance_with_se(batch)
    if emp.shape != block.values.shape:
        raise ValueError(f"shape mismatch: empirical {emp.shape} vs oracle {block.values.shape}")
    ks = []
    if ks_alpha is not None:
        n, _, p, _ = emp.shape
        for a in range(n):
            for i in range(p):
                d = np.zeros(p)
                d[i] = 1.0
                if block.values[a, a, i, i] > 0:
                    ks.append(ks_normality(batch, a, d, block, ks_alpha))
    return ComparisonReport(emp, block.values, se, float(tol), batch.R - batch.n_degenerate,
                            batch.n_degenerate, batch.target, tuple(ks))


@dataclass(frozen=True)
class SweepRow:
    nu: float
    max_abs_dev: float
    max_se: float
    worst_se: float
    passed: bool
    n_degenerate: int


def convergence_sweep(
    spec: ModelSpec,
    target: Target,
    nu_list,
    R: int,
    seed: int,
    *,
    tol: float = 0.05,
    mode: str = "quantile_normalized",
    threads: int = 1,
    block=None,
) -> list[SweepRow]:
    """Maximum oracle deviation at each intensity in ascending ``nu_list``."""
    nu_list = [float(v) for v in nu_list]
    if len(nu_list) < 2:
        raise ValueError("a sweep needs at least two intensities")
    if any(b <= a for a, b in zip(nu_list, nu_list[1:])):
        raise ValueError("intensities must be strictly ascending")
    if block is None:
        block = _oracle.oracle_block(spec, target, mode)
    rows = []
    for nu in nu_list:
        batch = run_replications(spec.with_nu(nu), target, R, seed, threads=threads)
        rep = compare_to_oracle(batch, block, tol)
        rows.append(SweepRow(nu, rep.max_abs_dev, rep.max_se, float(rep.se[rep.worst]),
                             rep.passed, rep.n_degenerate))
    return rows


def trend_non_increasing(rows, k: float = 2.0) -> bool:
    """Each max deviation is at most the previous one plus ``k`` SEs."""
    return all(
        b.max_abs_dev <= a.max_abs_dev + k * max(a.max_se, b.max_se)
        for a, b in zip(rows, rows[1:])
    )


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nu", "max_abs_dev", "max_se", "worst_se", "passed", "n_degenerate"])
        for r in rows:
            w.writerow([repr(r.nu), repr(r.max_abs_dev), repr(r.max_se), repr(r.worst_se),
                        int(r.passed), r.n_degenerate])
