"""Parametric function families used for rates, mark means and mark covariances.

Functions are selected by name and parameters rather than supplied as code, so
every model stays reproducible from its configuration document and every
oracle integrand has known breakpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

FAMILIES = ("zero", "constant", "affine", "piecewise_constant", "polynomial")


@dataclass(frozen=True, eq=False)
class ParamFunction:
    """A vectorised function ``R^dim -> R^shape`` from a built-in family.

    ``piecewise_constant`` and ``polynomial`` vary along a single coordinate
    ``axis``; pieces are right-continuous, i.e. ``values[i]`` applies on
    ``[breaks[i-1], breaks[i])``.
    """

    family: str
    dim: int
    shape: tuple[int, ...]
    value: np.ndarray | None = None
    coef: np.ndarray | None = None
    axis: int = 0
    breaks: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown function family {self.family!r}")
        if self.dim < 1:
            raise ValueError("input dimension must be positive")
        if not 0 <= self.axis < self.dim:
            raise ValueError(f"axis {self.axis} out of range for dimension {self.dim}")
        if self.family == "piecewise_constant":
            b = self.breaks
            if len(self.values) != len(b) + 1:
                raise ValueError("piecewise_constant needs len(values) == len(breaks) + 1")
            if np.any(np.diff(b) <= 0):
                raise ValueError("piecewise_constant breaks must be strictly increasing")
        arrays = (self.value, self.coef, self.values)
        for arr in arrays:
            if arr is not None:
                if not np.all(np.isfinite(arr)):
                    raise ValueError("function parameters must be finite")
                arr.setflags(write=False)

    # -- constructors -----------------------------------------------------

    @classmethod
    def zero(cls, shape=(), dim=1) -> ParamFunction:
        return cls("zero", dim, tuple(shape))

    @classmethod
    def constant(cls, value, dim=1) -> ParamFunction:
        value = np.array(value, dtype=float)
        return cls("constant", dim, value.shape, value=value)

    @classmethod
    def affine(cls, value, coef) -> ParamFunction:
        """``f(v) = value + sum_k coef[k] * v_k``."""
        value = np.array(value, dtype=float)
        coef = np.array(coef, dtype=float)
        if coef.shape[1:] != value.shape:
            raise ValueError(
                f"affine coef entries must have shape {value.shape}, got {coef.shape[1:]}"
            )
        return cls("affine", coef.shape[0], value.shape, value=value, coef=coef)

    @classmethod
    def piecewise_constant(cls, breaks, values, axis=0, dim=1) -> ParamFunction:
        values = np.array(values, dtype=float)
        return cls(
            "piecewise_constant",
            dim,
            values.shape[1:],
            axis=axis,
            breaks=np.array(breaks, dtype=float).reshape(-1),
            values=values,
        )

    @classmethod
    def polynomial(cls, coeffs, axis=0, dim=1) -> ParamFunction:
        """``f(v) = sum_k coeffs[k] * v_axis**k``."""
        coeffs = np.array(coeffs, dtype=float)
        if coeffs.ndim == 0 or len(coeffs) == 0:
            raise ValueError("polynomial needs at least one coefficient")
        return cls("polynomial", dim, coeffs.shape[1:], axis=axis, values=coeffs)

    # -- evaluation -------------------------------------------------------

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {x.shape[1]}")
        n = x.shape[0]
        if self.family == "zero":
            out = np.zeros((n,) + self.shape)
        elif self.family == "constant":
            out = np.broadcast_to(self.value, (n,) + self.shape).copy()
        elif self.family == "affine":
            out = self.value + np.tensordot(x, self.coef, axes=(1, 0))
        elif self.family == "piecewise_constant":
            idx = np.searchsorted(self.breaks, x[:, self.axis], side="right")
            out = self.values[idx]
        else:
            s = x[:, self.axis].reshape((n,) + (1,) * len(self.shape))
            out = np.zeros((n,) + self.shape) + self.values[-1]
            for c in self.values[-2::-1]:
                out = out * s + c
        return out[0] if single else out

    def depends_on(self, axis: int) -> bool:
        if self.family in ("zero", "constant"):
            return False
        if self.family == "affine":
            return bool(np.any(self.coef[axis] != 0))
        if self.axis != axis:
            return False
        if self.family == "piecewise_constant":
            return bool(np.any(self.values != self.values[0]))
        return bool(np.any(self.values[1:] != 0))

    def is_zero(self) -> bool:
        if self.family == "zero":
            return True
        if self.family == "constant":
            return not np.any(self.value)
        if self.family == "affine":
            return not (np.any(self.value) or np.any(self.coef))
        return not np.any(self.values)

    def breakpoints(self, axis: int) -> np.ndarray:
        """Discontinuity locations along ``axis``."""
        if self.family == "piecewise_constant" and self.axis == axis:
            return self.breaks
        return np.empty(0)


class Rate:
    """A positive rate function ``lambda(t)`` on ``[0, T]``.

    Wraps a scalar :class:`ParamFunction` of one variable and adds the closed
    forms needed downstream: cumulative rate, bounds, level sets and atoms.
    """

    def __init__(self, fn: ParamFunction, T: float):
        if fn.dim != 1 or fn.shape != ():
            raise ValueError("rate must be a scalar function of time")
        if not T > 0:
            raise ValueError(f"horizon T must be positive, got {T}")
        self.fn = fn
        self.T = float(T)
        lo, hi = self.bounds
        if not lo > 0:
            raise ValueError(f"rate must be bounded below by a positive constant, min is {lo}")

    def __repr__(self):
        return f"Rate({self.fn.family}, T={self.T})"

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.fn(t.reshape(-1, 1)).reshape(t.shape)

    @property
    def breaks(self) -> np.ndarray:
        b = self.fn.breakpoints(0)
        return b[(b > 0) & (b < self.T)]

    def _poly(self) -> np.polynomial.Polynomial | None:
        f = self.fn
        if f.family == "constant":
            return np.polynomial.Polynomial([float(f.value)])
        if f.family == "affine":
            return np.polynomial.Polynomial([float(f.value), float(f.coef[0])])
        if f.family == "polynomial":
            c = f.values.astype(float)
            # drop top terms below roundoff on [0, T]; they wreck companion-matrix roots
            size = np.abs(c) * max(self.T, 1.0) ** np.arange(len(c))
            keep = np.nonzero(size > 1e-15 * size.max())[0] if size.max() > 0 else [0]
            return np.polynomial.Polynomial(c[: keep[-1] + 1])
        return None

    def _pieces(self):
        """(start, end, value) for every piece meeting ``[0, T]``."""
        edges = np.concatenate([[0.0], self.breaks, [self.T]])
        mids = 0.5 * (edges[:-1] + edges[1:])
        return list(zip(edges[:-1], edges[1:], self(mids)))

    def cumulative(self, s) -> np.ndarray:
        """``Lambda(s) = int_0^s lambda``, exact for every family."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.T)
        p = self._poly()
        if p is not None:
            P = p.integ()
            return P(s) - P(0.0)
        out = np.zeros_like(s)
        for a, b, v in self._pieces():
            out = out + v * np.clip(s - a, 0.0, b - a)
        return out

    @cached_property
    def total(self) -> float:
        return float(self.cumulative(self.T))

    @cached_property
    def bounds(self) -> tuple[float, float]:
        """Certified (min, max) of the rate on ``[0, T]``."""
        p = self._poly()
        if p is None:
            vals = np.array([v for _, _, v in self._pieces()])
        else:
            cands = [0.0, self.T]
            if p.degree() >= 2:
                for r in p.deriv().roots():
                    if abs(r.imag) < 1e-12 and 0 < r.real < self.T:
                        cands.append(r.real)
            vals = p(np.array(cands))
        return float(vals.min()), float(vals.max())

    @property
    def has_atoms(self) -> bool:
        """True when ``lambda(X1)`` has point masses, X1 ~ lambda / Lambda(T)."""
        p = self._poly()
        return p is None or p.degree() == 0 or np.all(p.coef[1:] == 0)

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct levels and their probabilities under density lambda / Lambda(T).

        Only defined for piecewise-constant (including constant) rates.
        """
        if not self.has_atoms:
            raise ValueError("rate has a continuous intensity distribution")
        p = self._poly()
        if p is not None:
            return np.array([float(p.coef[0])]), np.array([1.0])
        masses: dict[float, float] = {}
        for a, b, v in self._pieces():
            masses[float(v)] = masses.get(float(v), 0.0) + v * (b - a)
        levels = np.array(sorted(masses))
        probs = np.array([masses[v] for v in levels]) / self.total
        return levels, probs

    def level_crossings(self, level: float) -> np.ndarray:
        """Times in ``(0, T)`` where a continuous rate crosses ``level``."""
        p = self._poly()
        if p is None:
            return np.empty(0)
        q = p - level
        if q.degree() == 0:
            return np.empty(0)
        r = q.roots()
        r = r[np.abs(r.imag) < 1e-9].real
        return np.sort(r[(r > 0) & (r < self.T)])

    def level_mass(self, level: float) -> float:
        """``int_0^T lambda(s) 1(lambda(s) <= level) ds``."""
        if self.has_atoms:
            levels, probs = self.atoms()
            return float(probs[levels <= level].sum() * self.total)
        edges = np.concatenate([[0.0], self.level_crossings(level), [self.T]])
        mids = 0.5 * (edges[:-1] + edges[1:])
        keep = self(mids) <= level
        Lam = self.cumulative(edges)
        return float(np.sum((Lam[1:] - Lam[:-1])[keep]))
