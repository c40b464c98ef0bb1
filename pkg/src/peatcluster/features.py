"""Warp and amplitude distance features per location.

Four measures are computed for every location:

    amp_osc    L1 distance between the registered, standardized oscillation
               SRVF and the standardized sinusoid template
    warp_dist  L1 distance between the oscillation warp and the identity
    warp_ind   fraction of interior grid points where the warp lies above
               the identity (oscillation lags the template)
    amp_trend  squared L2 distance between the standardized trend-gradient
               SRVF and the standardized mean trend-gradient SRVF

The columns are then z-scored across locations.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import DegenerateSRVFError, NumericalError, ValidationError
from .spline import Decomposition
from .srvf import (
    DEFAULT_LAMBDA,
    DEFAULT_SAMPLES,
    SRVF,
    TEMPLATE_PEAK,
    AlignmentResult,
    WarpingFunction,
    align,
    mean_srvf,
    sinusoid_template,
    standardize,
    to_srvf,
)

FEATURE_NAMES = ("amp_osc", "warp_dist", "warp_ind", "amp_trend")
FEATURES_CSV_HEADER = ["location_id", *FEATURE_NAMES, "z1", "z2", "z3", "z4", "flag"]
_ABOVE_TOL = 1e-12


def amplitude_distance_osc(q_registered: SRVF, q_template: SRVF, location_id: str | None = None) -> float:
    a = standardize(q_registered, location_id)
    b = standardize(q_template)
    return float(trapezoid(np.abs(a.values - b.values), a.grid))


def warp_distance(gamma: WarpingFunction) -> float:
    return float(trapezoid(np.abs(gamma.values - gamma.grid), gamma.grid))


def warp_indicator(gamma: WarpingFunction) -> float:
    t = gamma.grid[1:-1]
    if len(t) == 0:
        return 0.0
    return float(np.mean(gamma.values[1:-1] > t + _ABOVE_TOL))


def amplitude_distance_trend(q_trend: SRVF, q_mean: SRVF, location_id: str | None = None) -> float:
    a = standardize(q_trend, location_id)
    b = standardize(q_mean)
    return float(trapezoid((a.values - b.values) ** 2, a.grid))


@dataclass(frozen=True)
class FeatureVector:
    amp_osc: float
    warp_dist: float
    warp_ind: float
    amp_trend: float

    def as_array(self) -> np.ndarray:
        return np.array([self.amp_osc, self.warp_dist, self.warp_ind, self.amp_trend])


@dataclass(frozen=True, eq=False)
class Templates:
    oscillation: SRVF
    trend: SRVF


@dataclass(frozen=True, eq=False)
class LocationResult:
    features: FeatureVector
    q_osc: SRVF | None
    q_trend: SRVF
    alignment: AlignmentResult | None
    flag: str | None


@dataclass(eq=False)
class FeatureMatrix:
    """Raw features, z-scored features and degeneracy flags for N locations."""

    location_ids: list[str]
    raw: np.ndarray
    zscored: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    flags: list[str | None] = field(default_factory=list)
    results: list[LocationResult] = field(default_factory=list, repr=False)

    @property
    def N(self) -> int:
        return len(self.location_ids)

    @property
    def flagged(self) -> list[str]:
        return [i for i, f in zip(self.location_ids, self.flags) if f]

    def report(self) -> dict:
        return {
            "n_locations": self.N,
            "n_flagged": len(self.flagged),
            "flagged": [{"location_id": i, "flag": f} for i, f in zip(self.location_ids, self.flags) if f],
            "column_means": dict(zip(FEATURE_NAMES, self.means.tolist())),
            "column_sds": dict(zip(FEATURE_NAMES, self.sds.tolist())),
        }


def build_templates(decompositions: Sequence[Decomposition], epoch: dt.date, M: int = DEFAULT_SAMPLES,
                    peak: tuple[int, int] = TEMPLATE_PEAK) -> Templates:
    """Sinusoid template for oscillations and mean SRVF for trend gradients."""
    if not decompositions:
        raise ValidationError("no decompositions to build templates from")
    grid = decompositions[0].oscillation.grid
    for d in decompositions:
        if not np.array_equal(d.oscillation.grid, grid):
            raise ValidationError(f"location {d.location_id} is not on the shared daily grid")
    osc = to_srvf(sinusoid_template(grid, epoch, peak), M)
    trend = mean_srvf([to_srvf(d.trend_gradient, M) for d in decompositions])
    return Templates(osc, trend)


def location_features(decomposition: Decomposition, templates: Templates,
                      lam: float = DEFAULT_LAMBDA) -> LocationResult:
    """Features for one location; degenerate SRVFs give NaN entries and a flag."""
    M = templates.oscillation.M
    loc = decomposition.location_id
    flags = []
    # round-off left by the spline on flat data must not look like signal
    data_scale = float(np.max(np.abs(decomposition.combined.values)))
    span = float(decomposition.combined.grid[-1] - decomposition.combined.grid[0])
    q_osc = to_srvf(decomposition.oscillation, M, data_scale)
    q_trend = to_srvf(decomposition.trend_gradient, M, data_scale / span)
    amp_osc = warp_dist = warp_ind = amp_trend = math.nan
    result = None
    try:
        q_std = standardize(q_osc, loc)
        result = align(q_std, standardize(templates.oscillation), lam)
        amp_osc = amplitude_distance_osc(result.q_registered, templates.oscillation, loc)
        warp_dist = warp_distance(result.gamma)
        warp_ind = warp_indicator(result.gamma)
    except DegenerateSRVFError:
        flags.append("degenerate_oscillation")
    try:
        amp_trend = amplitude_distance_trend(q_trend, templates.trend, loc)
    except DegenerateSRVFError:
        flags.append("degenerate_trend")
    return LocationResult(FeatureVector(amp_osc, warp_dist, warp_ind, amp_trend),
                          q_osc, q_trend, result, ";".join(flags) or None)


def zscore_columns(raw: np.ndarray, flagged: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-score columns using unflagged rows; flagged NaNs get the column median z."""
    good = ~flagged
    if good.sum() < 2:
        raise ValidationError("z-scoring needs at least 2 non-degenerate locations")
    means = raw[good].mean(axis=0)
    sds = raw[good].std(axis=0, ddof=1)
    if np.any(~(sds > 0)):
        cols = [FEATURE_NAMES[i] for i in np.flatnonzero(~(sds > 0))]
        raise NumericalError(f"feature columns with zero spread across locations: {', '.join(cols)}")
    z = (raw - means) / sds
    medians = np.median(z[good], axis=0)
    missing = np.isnan(z)
    z[missing] = np.broadcast_to(medians, z.shape)[missing]
    return z, means, sds


def extract_features(decompositions: Sequence[Decomposition], templates: Templates,
                     lam: float = DEFAULT_LAMBDA, workers: int = 1) -> FeatureMatrix:
    """Per-location features followed by z-scoring across locations.

    Alignments run in a thread pool when ``workers > 1``; the DP kernel
    releases the GIL and results keep input order.
    """
    if len(decompositions) < 2:
        raise ValidationError("feature z-scoring needs N >= 2 locations")

    def one(d):
        return location_features(d, templates, lam)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, decompositions))
    else:
        results = [one(d) for d in decompositions]

    raw = np.array([r.features.as_array() for r in results])
    flags = [r.flag for r in results]
    z, means, sds = zscore_columns(raw, np.array([f is not None for f in flags]))
    return FeatureMatrix([d.location_id for d in decompositions], raw, z, means, sds, flags, results)


def write_features_csv(fm: FeatureMatrix, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURES_CSV_HEADER)
        for i, loc in enumerate(fm.location_ids):
            writer.writerow([loc, *(repr(float(v)) for v in fm.raw[i]),
                             *(repr(float(v)) for v in fm.zscored[i]), fm.flags[i] or ""])


def read_features_csv(path: str | Path) -> FeatureMatrix:
    """Inverse of :func:`write_features_csv`; column statistics are recomputed."""
    ids, raw, z, flags = [], [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FEATURES_CSV_HEADER:
            raise ValidationError(f"{path}: unexpected features header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(FEATURES_CSV_HEADER):
                raise ValidationError(f"{path} line {lineno}: wrong field count")
            try:
                vals = [float(v) for v in row[1:9]]
            except ValueError:
                raise ValidationError(f"{path} line {lineno}: non-numeric feature") from None
            ids.append(row[0])
            raw.append(vals[:4])
            z.append(vals[4:])
            flags.append(row[9] or None)
    raw_a = np.array(raw, dtype=float).reshape(-1, 4)
    z_a = np.array(z, dtype=float).reshape(-1, 4)
    if not np.all(np.isfinite(z_a)):
        raise ValidationError(f"{path}: z-scored features must be finite")
    good = np.array([f is None for f in flags])
    means = raw_a[good].mean(axis=0) if good.any() else np.full(4, np.nan)
    sds = raw_a[good].std(axis=0, ddof=1) if good.sum() > 1 else np.full(4, np.nan)
    return FeatureMatrix(ids, raw_a, z_a, means, sds, flags)


def dataset_features(dataset, spar_combined: float = 0.7, spar_trend: float = 1.0,
                     M: int = DEFAULT_SAMPLES, lam: float = DEFAULT_LAMBDA,
                     peak: tuple[int, int] = TEMPLATE_PEAK, workers: int = 1):
    """Decompose every series on the dataset-wide daily grid and extract features.

    Returns ``(features, decompositions, templates)``. Series that start late
    or end early are extended linearly by their splines.
    """
    from .spline import daily_grid, decompose

    start = min(int(s.times[0]) for s in dataset.series)
    stop = max(int(s.times[-1]) for s in dataset.series)
    grid = daily_grid([start, stop])
    decomps = []
    for s in dataset.series:
        try:
            decomps.append(decompose(s, spar_combined, spar_trend, grid))
        except ValidationError as exc:
            raise ValidationError(f"location {s.location_id}: {exc}") from None
    templates = build_templates(decomps, dataset.epoch, M, peak)
    return extract_features(decomps, templates, lam, workers), decomps, templates
