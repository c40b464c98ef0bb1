"""Loading, writing and synthesizing spatial displacement time series.

A dataset is a set of locations (id, lon, lat, optional site tag), each
carrying one irregularly sampled displacement series. Times are stored as
integer day offsets from the dataset epoch, which is the earliest observed
date.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

LONG_CSV_HEADER = ["location_id", "lon", "lat", "date", "displacement_mm"]

# 80 x 90 m pixels at roughly 58.4 N
DEFAULT_SPACING = (0.00112, 0.00072)
DEFAULT_RADIUS = 0.00157
MIN_OBSERVATIONS = 4


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Location:
    id: str
    lon: float
    lat: float
    site: str | None = None

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0) or not (-90.0 <= self.lat <= 90.0):
            raise ValidationError(
                f"location {self.id}: coordinates ({self.lon}, {self.lat}) out of range"
            )


@dataclass(frozen=True, eq=False)
class Series:
    """Displacement observations (mm) at integer day offsets."""

    location_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times, np.int64)
        values = _frozen(self.values, np.float64)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or times.shape != values.shape:
            raise ValidationError(f"location {self.location_id}: times/values shape mismatch")
        if len(times) < MIN_OBSERVATIONS:
            raise ValidationError(
                f"location {self.location_id}: {len(times)} observations, "
                f"need at least {MIN_OBSERVATIONS}"
            )
        if np.any(np.diff(times) <= 0):
            raise ValidationError(f"location {self.location_id}: times not strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"location {self.location_id}: non-finite displacement")

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, Series):
            return NotImplemented
        return (
            self.location_id == other.location_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    epoch: dt.date
    locations: tuple[Location, ...]
    series: tuple[Series, ...]

    def __post_init__(self):
        object.__setattr__(self, "locations", tuple(self.locations))
        object.__setattr__(self, "series", tuple(self.series))
        if len(self.locations) != len(self.series):
            raise ValidationError("exactly one series per location is required")
        ids = [loc.id for loc in self.locations]
        if len(set(ids)) != len(ids):
            raise ValidationError("location ids must be unique")
        for loc, s in zip(self.locations, self.series):
            if loc.id != s.location_id:
                raise ValidationError(f"series order mismatch at location {loc.id}")

    @property
    def N(self) -> int:
        return len(self.locations)

    @property
    def ids(self) -> list[str]:
        return [loc.id for loc in self.locations]

    def coordinates(self) -> np.ndarray:
        """(N, 2) array of (lon, lat)."""
        return np.array([[loc.lon, loc.lat] for loc in self.locations], dtype=float).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Radius neighbourhoods in compressed sparse row form.

    ``indices[indptr[j]:indptr[j + 1]]`` lists the neighbours of location j
    in increasing order.
    """

    radius: float
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, j: int) -> np.ndarray:
        return self.indices[self.indptr[j] : self.indptr[j + 1]]

    def adjacency(self) -> list[list[int]]:
        return [self.neighbors(j).tolist() for j in range(self.n)]


def _parse_date(text: str, lineno: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise ValidationError(f"line {lineno}: invalid ISO-8601 date {text!r}") from None


def _parse_float(text: str, what: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"line {lineno}: invalid {what} {text!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"line {lineno}: non-finite {what}")
    return value


def load_long_csv(path: str | Path) -> Dataset:
    """Read a long-format CSV into a :class:`Dataset`.

    Expected header is ``location_id,lon,lat,date,displacement_mm``, with an
    optional trailing ``site`` column. The epoch is the earliest date in the
    file; location order follows first appearance.
    """
    path = Path(path)
    rows: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if header[:5] != LONG_CSV_HEADER or len(header) > 6 or (
            len(header) == 6 and header[5] != "site"
        ):
            raise ValidationError(f"{path}: unexpected header {header}")
        has_site = len(header) == 6
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            loc_id = row[0].strip()
            if not loc_id:
                raise ValidationError(f"line {lineno}: empty location_id")
            lon = _parse_float(row[1], "lon", lineno)
            lat = _parse_float(row[2], "lat", lineno)
            date = _parse_date(row[3], lineno)
            disp = _parse_float(row[4], "displacement_mm", lineno)
            site = (row[5].strip() or None) if has_site else None
            entry = rows.get(loc_id)
            if entry is None:
                entry = rows[loc_id] = {"lon": lon, "lat": lat, "site": site, "obs": {}}
            elif (entry["lon"], entry["lat"]) != (lon, lat):
                raise ValidationError(f"line {lineno}: location {loc_id} changes coordinates")
            if date in entry["obs"]:
                raise ValidationError(f"line {lineno}: duplicate observation ({loc_id}, {date})")
            entry["obs"][date] = disp

    if not rows:
        raise ValidationError(f"{path}: no observations")
    short = [k for k, v in rows.items() if len(v["obs"]) < MIN_OBSERVATIONS]
    if short:
        raise ValidationError(
            f"locations with fewer than {MIN_OBSERVATIONS} observations: {', '.join(short)}"
        )
    epoch = min(min(v["obs"]) for v in rows.values())
    locations, series = [], []
    for loc_id, v in rows.items():
        try:
            locations.append(Location(loc_id, v["lon"], v["lat"], v["site"]))
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        dates = sorted(v["obs"])
        times = [(d - epoch).days for d in dates]
        series.append(Series(loc_id, times, [v["obs"][d] for d in dates]))
    return Dataset(epoch, tuple(locations), tuple(series))


def write_long_csv(dataset: Dataset, path: str | Path) -> None:
    has_site = any(loc.site is not None for loc in dataset.locations)
    header = LONG_CSV_HEADER + (["site"] if has_site else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for loc, s in zip(dataset.locations, dataset.series):
            for t, v in zip(s.times, s.values):
                row = [loc.id, repr(loc.lon), repr(loc.lat),
                       (dataset.epoch + dt.timedelta(days=int(t))).isoformat(), repr(float(v))]
                if has_site:
                    row.append(loc.site or "")
                writer.writerow(row)


def write_labels_csv(ids: Sequence[str], labels: Sequence[int], path: str | Path) -> None:
    """Write ``location_id,true_label`` with 1-based labels."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["location_id", "true_label"])
        for loc_id, lab in zip(ids, labels):
            writer.writerow([loc_id, int(lab) + 1])


def read_labels_csv(path: str | Path) -> dict[str, int]:
    """Inverse of :func:`write_labels_csv`; returns 0-based labels."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return {row["location_id"]: int(row["true_label"]) - 1 for row in reader}


def build_neighborhoods(locations: Sequence[Location] | np.ndarray, radius: float = DEFAULT_RADIUS) -> NeighborGraph:
    """Neighbourhoods of all locations within ``radius`` degrees (inclusive).

    Distance is plain Euclidean distance in (lon, lat); a location is never
    its own neighbour.
    """
    if not radius > 0:
        raise ValidationError("radius must be positive")
    if isinstance(locations, np.ndarray):
        xy = np.asarray(locations, dtype=float).reshape(-1, 2)
    else:
        xy = np.array([[loc.lon, loc.lat] for loc in locations], dtype=float).reshape(-1, 2)
    n = len(xy)
    if n == 0:
        return NeighborGraph(radius, _frozen([0], np.int64), _frozen([], np.int64))
    # Candidate pairs with slack, then the exact inclusive test.
    pairs = cKDTree(xy).query_pairs(radius * (1 + 1e-9) + 1e-15, output_type="ndarray")
    if len(pairs):
        d = np.hypot(xy[pairs[:, 0], 0] - xy[pairs[:, 1], 0], xy[pairs[:, 0], 1] - xy[pairs[:, 1], 1])
        pairs = pairs[d <= radius]
    src = np.concatenate([pairs[:, 0], pairs[:, 1]]) if len(pairs) else np.empty(0, np.int64)
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]]) if len(pairs) else np.empty(0, np.int64)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return NeighborGraph(float(radius), _frozen(indptr, np.int64), _frozen(dst, np.int64))


def grid_graph(n_rows: int, n_cols: int, spacing: float = 1.0, radius: float | None = None) -> tuple[np.ndarray, NeighborGraph]:
    """Regular grid coordinates and their radius graph (rook adjacency by default)."""
    yy, xx = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    xy = np.column_stack([xx.ravel(), yy.ravel()]).astype(float) * spacing
    return xy, build_neighborhoods(xy, spacing if radius is None else radius)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the three-archetype synthetic generator.

    Archetypes: 0 winter-peaking large oscillation with flat trend, 1
    autumn-peaking small oscillation with flat trend, 2 incoherent
    oscillation with a steep, irregular decline.
    """

    n_per_cluster: tuple[int, int, int] = (10, 10, 10)
    noise_sd: float = 2.0
    seed: int = 0
    spacing: tuple[float, float] = DEFAULT_SPACING
    origin: tuple[float, float] = (-3.50, 58.38)
    epoch: dt.date = dt.date(2015, 3, 12)
    end: dt.date = dt.date(2019, 7, 1)
    cadence_switch: dt.date = dt.date(2016, 9, 26)
    peak_doy: tuple[int, int] = (36, 288)
    amplitude_mm: tuple[float, float, float] = (8.0, 6.0, 1.0)
    slope_mm_per_year: tuple[float, float, float] = (0.0, 0.0, -15.0)
    peak_jitter_days: float = 10.0
    amplitude_jitter: float = 0.1
    regional_drop_mm: float = 0.0
    regional_center: dt.date = dt.date(2017, 10, 1)
    regional_width_days: float = 120.0
    irregular_trend_mm: float = 8.0
    irregular_period_days: tuple[float, float] = (500.0, 1000.0)
    incoherent_period_days: tuple[float, float] = (40.0, 120.0)

    def __post_init__(self):
        counts = tuple(int(c) for c in self.n_per_cluster)
        if len(counts) != 3 or any(c < 1 for c in counts):
            raise ValidationError("n_per_cluster must be three counts >= 1")
        object.__setattr__(self, "n_per_cluster", counts)
        if not self.noise_sd >= 0:
            raise ValidationError("noise_sd must be >= 0")
        if self.end <= self.epoch:
            raise ValidationError("end must follow epoch")


def acquisition_offsets(cfg: SynthConfig) -> np.ndarray:
    """12-day revisits until the cadence switch, 6-day revisits afterwards."""
    switch = (cfg.cadence_switch - cfg.epoch).days
    end = (cfg.end - cfg.epoch).days
    first = np.arange(0, min(switch, end) + 1, 12)
    second = np.arange(first[-1] + 6, end + 1, 6)
    return np.concatenate([first, second])


def _day_of_year(epoch: dt.date, offsets: np.ndarray) -> np.ndarray:
    # continuous day-of-year, 1-based, anchored at the epoch
    return epoch.timetuple().tm_yday + offsets.astype(float)


def noiseless_signal(cfg: SynthConfig, archetype: int, offsets: np.ndarray, params: dict) -> np.ndarray:
    """Deterministic displacement (mm) for one location given its drawn parameters."""
    t = offsets.astype(float)
    doy = _day_of_year(cfg.epoch, offsets)
    center = (cfg.regional_center - cfg.epoch).days
    regional = -cfg.regional_drop_mm / (1.0 + np.exp(-(t - center) / cfg.regional_width_days))
    slope = cfg.slope_mm_per_year[archetype] * t / 365.25
    amp = cfg.amplitude_mm[archetype] * params["amp_scale"]
    if archetype < 2:
        osc = amp * np.cos(2 * np.pi * (doy - params["peak"]) / 365.25)
        irregular = 0.0
    else:
        osc = amp * np.sin(2 * np.pi * t / params["osc_period"] + params["osc_phase"])
        irregular = cfg.irregular_trend_mm * np.sin(2 * np.pi * t / params["trend_period"] + params["trend_phase"])
    return osc + regional + slope + irregular


def synthesize_dataset(cfg: SynthConfig = SynthConfig()) -> tuple[Dataset, np.ndarray]:
    """Generate a spatially blocked three-archetype dataset.

    Locations are laid out row-major on a regular grid ordered by archetype,
    so each archetype occupies a contiguous band. Returns the dataset and the
    0-based true archetype of each location.
    """
    rng = np.random.default_rng(cfg.seed)
    offsets = acquisition_offsets(cfg)
    labels = np.repeat(np.arange(3), cfg.n_per_cluster)
    n = len(labels)
    n_cols = max(1, int(math.ceil(math.sqrt(n))))
    locations, series = [], []
    for j, arch in enumerate(labels):
        params = {
            "peak": cfg.peak_doy[min(arch, 1)] + rng.normal(0.0, cfg.peak_jitter_days),
            "amp_scale": 1.0 + rng.uniform(-cfg.amplitude_jitter, cfg.amplitude_jitter),
            "osc_period": rng.uniform(*cfg.incoherent_period_days),
            "osc_phase": rng.uniform(0.0, 2 * np.pi),
            "trend_period": rng.uniform(*cfg.irregular_period_days),
            "trend_phase": rng.uniform(0.0, 2 * np.pi),
        }
        clean = noiseless_signal(cfg, int(arch), offsets, params)
        # drawn unconditionally so parameters do not depend on noise_sd
        noisy = clean + cfg.noise_sd * rng.standard_normal(len(offsets))
        row, col = divmod(j, n_cols)
        loc_id = f"S{j:05d}"
        lon = round(cfg.origin[0] + col * cfg.spacing[0], 8)
        lat = round(cfg.origin[1] + row * cfg.spacing[1], 8)
        locations.append(Location(loc_id, lon, lat))
        series.append(Series(loc_id, offsets, noisy))
    return Dataset(cfg.epoch, tuple(locations), tuple(series)), labels
