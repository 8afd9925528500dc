"""Cell-by-time count fields, weekly trend series and normalized density grids."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import timedelta
from typing import Optional, Union

import numpy as np
import pandas as pd

from .core import DAY, WEEK, EventDataset, Records, SourceChannel, TimeGrid, format_timestamp

BIN_WIDTHS = {"day": DAY, "week": WEEK}


def _bin_width(width) -> timedelta:
    if isinstance(width, timedelta):
        return width
    try:
        return BIN_WIDTHS[width]
    except KeyError:
        raise ValueError(f"bin width must be 'day' or 'week', got {width!r}") from None


def _category_set(categories) -> Optional[frozenset]:
    if categories is None:
        return None
    if isinstance(categories, str):
        return frozenset([categories])
    return frozenset(categories)


def filter_mask(frame: pd.DataFrame, categories=None, source: Optional[SourceChannel] = None) -> np.ndarray:
    mask = np.ones(len(frame), dtype=bool)
    categories = _category_set(categories)
    if categories is not None:
        mask &= frame["category"].isin(categories).to_numpy()
    if source is not None:
        mask &= frame["source"].to_numpy() == SourceChannel(source).code
    return mask


def filter_dataset(dataset: EventDataset, categories=None, source: Optional[SourceChannel] = None) -> EventDataset:
    """Subset of the records; cells and window are kept as they are."""
    mask = filter_mask(dataset.frame, categories, source)
    return EventDataset(Records(dataset.frame[mask]), dataset.cells, dataset.window, dataset.rejected_count)


@dataclass(frozen=True)
class SpatioTemporalField:
    """Event counts per cell (rows, sorted by cell id) and time bin (columns)."""

    grid: TimeGrid
    cells: tuple
    counts: np.ndarray
    category_filter: Optional[frozenset] = None
    source_filter: Optional[SourceChannel] = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (len(self.cells), self.grid.bin_count):
            raise ValueError(f"counts shape {counts.shape} does not match cells x bins")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_bins(self) -> int:
        return self.grid.bin_count

    def total(self) -> int:
        return int(self.counts.sum())


def build_field(
    dataset: EventDataset,
    bin_width: Union[str, timedelta] = "week",
    category_filter=None,
    source_filter: Optional[SourceChannel] = None,
) -> SpatioTemporalField:
    width = _bin_width(bin_width)
    grid = TimeGrid.covering(dataset.window[0], dataset.window[1], width)
    frame = dataset.frame
    cats = _category_set(category_filter)
    source = SourceChannel(source_filter) if source_filter is not None else None
    mask = filter_mask(frame, cats, source)

    cells = dataset.cells
    counts = np.zeros((len(cells), grid.bin_count), dtype=np.int64)
    if mask.any():
        index = pd.Index([c.cell_id for c in cells])
        rows = index.get_indexer(frame["cell_id"][mask])
        if (rows < 0).any():
            raise ValueError("dataset has records whose cell_id has no GridCell")
        bins = grid.bin_indices(frame["reported_at"].to_numpy()[mask])
        if ((bins < 0) | (bins >= grid.bin_count)).any():
            raise ValueError("dataset has records outside its window")
        flat = np.bincount(rows.astype(np.int64) * grid.bin_count + bins, minlength=counts.size)
        counts = flat.reshape(counts.shape)
    return SpatioTemporalField(grid, cells, counts, cats, source)


@dataclass(frozen=True)
class TrendSeries:
    grid: TimeGrid
    values: np.ndarray
    category: Optional[str]

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "origin": format_timestamp(self.grid.origin),
            "bin_width_days": self.grid.bin_width.days,
            "bins": [{"bin": k, "value": int(v)} for k, v in enumerate(self.values)],
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["bin", "value"])
        writer.writerows((k, int(v)) for k, v in enumerate(self.values))
        return out.getvalue()


def weekly_histogram(dataset: EventDataset, category: Optional[str]) -> TrendSeries:
    """Events per week summed over all cells.  ``None`` counts every category."""
    field = build_field(dataset, "week", category_filter=category)
    return TrendSeries(field.grid, field.counts.sum(axis=0), category)


@dataclass(frozen=True)
class DensityGrid:
    """Max-normalized 2-D histogram; ``values[iy, ix]`` with y along latitude."""

    resolution: tuple
    values: np.ndarray
    bounds: Optional[tuple]
    event_count: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        nx, ny = self.resolution
        return {
            "nx": nx,
            "ny": ny,
            "bounds": None if self.bounds is None else dict(zip(("min_lon", "max_lon", "min_lat", "max_lat"), self.bounds)),
            "event_count": self.event_count,
            "degenerate": self.degenerate,
            "values": [[float(v) for v in row] for row in self.values],
        }

    def to_csv(self) -> str:
        """Long format ``x, y, value`` with x and y normalized cell centers in [0, 1]."""
        nx, ny = self.resolution
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["x", "y", "value"])
        for iy in range(ny):
            for ix in range(nx):
                writer.writerow([repr((ix + 0.5) / nx), repr((iy + 0.5) / ny), repr(float(self.values[iy, ix]))])
        return out.getvalue()


def density_counts(lon: np.ndarray, lat: np.ndarray, resolution: tuple):
    """Histogram over min-max bounds; the upper edge is closed."""
    nx, ny = resolution
    bounds = (float(lon.min()), float(lon.max()), float(lat.min()), float(lat.max()))

    def index(v, lo, hi, n):
        if hi == lo:
            return np.zeros(len(v), dtype=np.int64)
        idx = np.floor((v - lo) / (hi - lo) * n).astype(np.int64)
        return np.clip(idx, 0, n - 1)

    ix = index(lon, bounds[0], bounds[1], nx)
    iy = index(lat, bounds[2], bounds[3], ny)
    counts = np.bincount(iy * nx + ix, minlength=nx * ny).reshape(ny, nx)
    return counts, bounds


def spatial_density(dataset: EventDataset, category=None, resolution: tuple = (50, 50)) -> DensityGrid:
    nx, ny = (int(v) for v in resolution)
    if nx < 1 or ny < 1:
        raise ValueError("resolution must be at least 1 x 1")
    frame = dataset.frame
    mask = filter_mask(frame, category)
    if not mask.any():
        return DensityGrid((nx, ny), np.zeros((ny, nx)), None, 0, degenerate=True)
    lon = frame["longitude"].to_numpy()[mask]
    lat = frame["latitude"].to_numpy()[mask]
    counts, bounds = density_counts(lon, lat, (nx, ny))
    values = counts / counts.max()
    degenerate = bounds[0] == bounds[1] or bounds[2] == bounds[3]
    return DensityGrid((nx, ny), values, bounds, int(mask.sum()), degenerate)


def categories_of(dataset: EventDataset, source: Optional[SourceChannel] = None) -> list:
    frame = dataset.frame
    if source is not None:
        frame = frame[frame["source"].to_numpy() == SourceChannel(source).code]
    return sorted(frame["category"].unique())

