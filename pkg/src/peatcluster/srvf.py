"""Square-root velocity functions and penalized elastic alignment.

A curve f on [0, 1] maps to q = f' / sqrt(|f'|) (zero where f' = 0). A warp
gamma acts on q by ``(q o gamma) * sqrt(gamma')``, which preserves the L2
norm. ``align`` finds the warp minimizing

    || q* - (q o gamma) sqrt(gamma') ||^2 + lam * || 1 - sqrt(gamma') ||^2

over piecewise-linear warps whose vertices lie on the M x M sample lattice
and whose segments have slopes b/a with coprime a, b in 1..6.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from math import gcd, log
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from .errors import DegenerateSRVFError, ValidationError
from .spline import DailyCurve

DEFAULT_SAMPLES = 79
DEFAULT_LAMBDA = 0.1
MIN_SAMPLES = 8
MAX_STEP = 6
YEAR_DAYS = 365.25
TEMPLATE_PEAK = (5, 5)  # month, day
# derivative magnitudes below this fraction of max|f| count as zero
ZERO_DERIVATIVE_RTOL = 1e-10
TIE_TOL = 1e-12


def unit_grid(M: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, M)


@dataclass(frozen=True, eq=False)
class SRVF:
    """q sampled at M uniform points of [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or len(values) < 2:
            raise ValidationError("SRVF needs a 1-d array of at least 2 samples")
        if not np.all(np.isfinite(values)):
            raise ValidationError("SRVF has non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return len(self.values)

    @property
    def grid(self) -> np.ndarray:
        return unit_grid(self.M)

    def __neg__(self) -> SRVF:
        return SRVF(-self.values)


@dataclass(frozen=True, eq=False)
class WarpingFunction:
    """Monotone boundary-preserving warp of [0, 1] sampled on the uniform grid."""

    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.values, dtype=np.float64)
        if g.ndim != 1 or len(g) < 2:
            raise ValidationError("warp needs at least 2 samples")
        if abs(g[0]) > 1e-12 or abs(g[-1] - 1.0) > 1e-12:
            raise ValidationError("warp must satisfy gamma(0) = 0 and gamma(1) = 1")
        if np.any(np.diff(g) < 0):
            raise ValidationError("warp must be non-decreasing")
        g = g.copy()
        g[0], g[-1] = 0.0, 1.0
        object.__setattr__(self, "values", g)

    @classmethod
    def identity(cls, M: int) -> WarpingFunction:
        return cls(unit_grid(M))

    @property
    def M(self) -> int:
        return len(self.values)

    @property
    def grid(self) -> np.ndarray:
        return unit_grid(self.M)

    def derivative(self) -> np.ndarray:
        """Central differences inside, one-sided at the ends (non-negative for monotone warps)."""
        return np.gradient(self.values, self.grid)

    def inverse(self) -> WarpingFunction:
        """Piecewise-linear inverse, resampled on the same grid."""
        t = self.grid
        g = self.values
        keep = np.concatenate([[True], np.diff(g) > 0])
        return WarpingFunction(np.interp(t, g[keep], t[keep]))

    def compose(self, inner: WarpingFunction) -> WarpingFunction:
        """``self o inner``."""
        return WarpingFunction(np.interp(inner.values, self.grid, self.values))


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    gamma: WarpingFunction
    q_registered: SRVF
    cost: float
    data_term: float
    penalty_term: float
    lam: float

    def to_csv(self, path: str | Path, q: SRVF, q_star: SRVF) -> None:
        rows = np.column_stack([self.gamma.grid, q.values, q_star.values,
                                self.gamma.values, self.q_registered.values])
        np.savetxt(path, rows, delimiter=",", header="t,q,q_star,gamma,q_registered",
                   comments="", fmt="%.17g")


def _signed_sqrt(d: np.ndarray) -> np.ndarray:
    return np.sign(d) * np.sqrt(np.abs(d))


def srvf_from_derivative(deriv: np.ndarray, scale: float | None = None) -> SRVF:
    """q from sampled derivative values, applying the zero-derivative case."""
    deriv = np.asarray(deriv, dtype=np.float64).copy()
    if scale is not None:
        deriv[np.abs(deriv) <= ZERO_DERIVATIVE_RTOL * scale] = 0.0
    return SRVF(_signed_sqrt(deriv))


def to_srvf(curve: DailyCurve, M: int = DEFAULT_SAMPLES, scale_floor: float = 0.0) -> SRVF:
    """SRVF of a daily curve after mapping its span onto [0, 1].

    The derivative is taken on the daily grid (second-order differences) and
    then linearly interpolated at M uniform points. Derivatives below
    ``1e-10 * max(max|f|, scale_floor)`` count as zero; ``scale_floor`` lets
    callers supply the magnitude of the data the curve was derived from.
    """
    if M < MIN_SAMPLES:
        raise ValidationError(f"need at least {MIN_SAMPLES} SRVF samples, got {M}")
    if len(curve) < 2:
        raise ValidationError("curve needs at least 2 points")
    u = (curve.grid - curve.grid[0]) / float(curve.grid[-1] - curve.grid[0])
    edge = 2 if len(curve) >= 3 else 1
    deriv = np.gradient(curve.values, u, edge_order=edge)
    sampled = np.interp(unit_grid(M), u, deriv)
    scale = max(float(np.max(np.abs(curve.values))), float(scale_floor))
    return srvf_from_derivative(sampled, scale=scale)


def standardize(q: SRVF, location_id: str | None = None) -> SRVF:
    """Shift and scale q to sample mean 0 and sample SD 1 (ddof=1)."""
    v = q.values
    sd = float(np.std(v, ddof=1))
    if not sd > 0 or not np.isfinite(sd):
        raise DegenerateSRVFError("SRVF has zero variance", location_id)
    z = (v - v.mean()) / sd
    # one correction pass removes rounding left by the first
    z = (z - z.mean()) / np.std(z, ddof=1)
    return SRVF(z)


def mean_srvf(qs: Sequence[SRVF]) -> SRVF:
    if len(qs) == 0:
        raise ValidationError("mean of an empty SRVF list")
    M = qs[0].M
    if any(q.M != M for q in qs):
        raise ValidationError("SRVFs must share a grid")
    return SRVF(np.mean(np.stack([q.values for q in qs]), axis=0))


def apply_warp(q: SRVF, gamma: WarpingFunction) -> SRVF:
    """``(q o gamma) sqrt(gamma')`` with q linearly interpolated."""
    if not isinstance(gamma, WarpingFunction):
        gamma = WarpingFunction(gamma)
    if q.M != gamma.M:
        raise ValidationError("q and gamma must share a grid")
    return SRVF(np.interp(gamma.values, q.grid, q.values) * np.sqrt(gamma.derivative()))


def dp_steps(max_step: int = MAX_STEP) -> np.ndarray:
    """Lattice steps (dk, dl) in tie-break priority order.

    Slopes nearer 1 (in log ratio) come first; among equals, the step whose
    predecessor index is lexicographically smaller.
    """
    steps = [(a, b) for a in range(1, max_step + 1) for b in range(1, max_step + 1) if gcd(a, b) == 1]
    steps.sort(key=lambda s: (abs(log(s[1] / s[0])), -s[0], -s[1]))
    return np.array(steps, dtype=np.int64)


@nb.njit(cache=True, nogil=True)
def _segment_cost(q, qstar, k0, l0, k1, l1, h):
    a = k1 - k0
    m = (l1 - l0) / a
    sm = np.sqrt(m)
    M = q.shape[0]
    acc = 0.0
    for i in range(a + 1):
        pos = l0 + (l1 - l0) * i / a
        il = int(np.floor(pos))
        if il >= M - 1:
            il = M - 2
        frac = pos - il
        d = qstar[k0 + i] - (q[il] * (1.0 - frac) + q[il + 1] * frac) * sm
        w = 0.5 if (i == 0 or i == a) else 1.0
        acc += w * d * d
    return acc * h, (1.0 - sm) ** 2 * a * h


@nb.njit(cache=True, nogil=True)
def _dp_align(q, qstar, lam, steps, tie_tol):
    M = q.shape[0]
    h = 1.0 / (M - 1)
    cost = np.full((M, M), np.inf)
    back = np.full((M, M), -1, dtype=np.int64)
    cost[0, 0] = 0.0
    ns = steps.shape[0]
    for k in range(1, M):
        for l in range(1, M):
            best = np.inf
            arg = -1
            for s in range(ns):
                k0 = k - steps[s, 0]
                l0 = l - steps[s, 1]
                if k0 < 0 or l0 < 0:
                    continue
                prev = cost[k0, l0]
                if prev == np.inf:
                    continue
                data, pen = _segment_cost(q, qstar, k0, l0, k, l, h)
                c = prev + data + lam * pen
                if c < best - tie_tol:
                    best = c
                    arg = s
            cost[k, l] = best
            back[k, l] = arg

    # backtrack into a warp sampled on the grid
    gamma = np.empty(M)
    gamma[0] = 0.0
    data_total = 0.0
    pen_total = 0.0
    k = M - 1
    l = M - 1
    while k > 0:
        s = back[k, l]
        k0 = k - steps[s, 0]
        l0 = l - steps[s, 1]
        for i in range(k0 + 1, k + 1):
            gamma[i] = (l0 + (l - l0) * (i - k0) / (k - k0)) * h
        data, pen = _segment_cost(q, qstar, k0, l0, k, l, h)
        data_total += data
        pen_total += pen
        k = k0
        l = l0
    return cost[M - 1, M - 1], gamma, data_total, pen_total


def align(q: SRVF, q_star: SRVF, lam: float = DEFAULT_LAMBDA) -> AlignmentResult:
    """Register ``q`` to ``q_star`` by dynamic programming over lattice warps."""
    if q.M != q_star.M:
        raise ValidationError("q and q_star must share a grid")
    if not lam >= 0:
        raise ValidationError("lambda must be non-negative")
    cost, gamma, data, pen = _dp_align(q.values, q_star.values, float(lam), dp_steps(), TIE_TOL)
    warp = WarpingFunction(gamma)
    return AlignmentResult(warp, apply_warp(q, warp), float(cost), float(data), float(pen), float(lam))


def path_cost(q: SRVF, q_star: SRVF, lam: float, vertices: Sequence[tuple[int, int]]) -> float:
    """Objective of the lattice path through ``vertices`` (numpy evaluation)."""
    M = q.M
    h = 1.0 / (M - 1)
    total = 0.0
    for (k0, l0), (k1, l1) in zip(vertices[:-1], vertices[1:]):
        i = np.arange(k0, k1 + 1)
        slope = (l1 - l0) / (k1 - k0)
        pos = l0 + (l1 - l0) * (i - k0) / (k1 - k0)
        warped = np.interp(pos * h, q.grid, q.values) * np.sqrt(slope)
        resid = (q_star.values[i] - warped) ** 2
        total += h * (resid.sum() - 0.5 * (resid[0] + resid[-1]))
        total += lam * (1.0 - np.sqrt(slope)) ** 2 * (k1 - k0) * h
    return float(total)


def first_peak_day(epoch: dt.date, peak: tuple[int, int] = TEMPLATE_PEAK) -> int:
    """1-based day number of the first peak date on or after the epoch."""
    month, day = peak
    date = dt.date(epoch.year, month, day)
    if date < epoch:
        date = dt.date(epoch.year + 1, month, day)
    return (date - epoch).days + 1


def sinusoid_value(day, epoch: dt.date, peak: tuple[int, int] = TEMPLATE_PEAK,
                   period: float = YEAR_DAYS) -> np.ndarray:
    """Unit-amplitude annual cosine peaking on the given calendar date."""
    day = np.asarray(day, dtype=float)
    return np.cos(2.0 * np.pi * (day - first_peak_day(epoch, peak)) / period)


def sinusoid_template(grid: np.ndarray, epoch: dt.date, peak: tuple[int, int] = TEMPLATE_PEAK,
                      period: float = YEAR_DAYS) -> DailyCurve:
    """Oscillation template on a daily grid of 1-based day numbers.

    Maxima fall on the peak date; minima half a period later (about 4-5
    November for a 5 May peak).
    """
    grid = np.asarray(grid, dtype=np.int64)
    return DailyCurve(grid, sinusoid_value(grid, epoch, peak, period))
