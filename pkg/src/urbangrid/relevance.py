"""Temporal and spatial relevance curves over a cell-by-time count field.

Relevance between two series is the mean product of their deviations from
their own cell means, taken over the overlapping time bins.  Global curves
weight each cell (or cell pair) by its mean event rate (or product of
rates).
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .aggregation import SpatioTemporalField
from .core import GridCell, haversine

LAG_AXIS = "lag-days"
DISTANCE_AXIS = "distance-meters"
OUTPUT_DISTANCE_UNIT_M = 10_000.0

# matrix entries evaluated per block in the temporal and spatial sweeps
_GRAM_BLOCK = 2_000_000
_PAIR_BLOCK = 2_000_000


class RelevanceError(ValueError):
    pass


@dataclass(frozen=True)
class CellStats:
    cell: GridCell
    mean: float


@dataclass(frozen=True)
class DistanceBin:
    lower: float
    upper: float

    @property
    def representative(self) -> float:
        return (self.lower + self.upper) / 2.0


@dataclass(frozen=True)
class CurvePoint:
    coordinate: float
    score: Optional[float]
    support: int

    @property
    def missing(self) -> bool:
        return self.score is None


@dataclass(frozen=True)
class RelevanceCurve:
    axis: str
    points: tuple
    normalized: bool
    bins: tuple = ()

    @property
    def coordinates(self) -> np.ndarray:
        return np.array([p.coordinate for p in self.points])

    @property
    def scores(self) -> np.ndarray:
        """Scores with missing points as NaN."""
        return np.array([np.nan if p.score is None else p.score for p in self.points])

    @property
    def degenerate(self) -> bool:
        return all(p.missing for p in self.points)

    def local_maxima(self) -> list:
        """Indices whose score is >= both present neighbours and > at least one."""
        s = self.scores
        found = []
        for k in range(1, len(s) - 1):
            left, mid, right = s[k - 1], s[k], s[k + 1]
            if np.isnan([left, mid, right]).any():
                continue
            if mid >= left and mid >= right and (mid > left or mid > right):
                found.append(k)
        return found

    def output_coordinate(self, point: CurvePoint) -> float:
        if self.axis == DISTANCE_AXIS:
            return point.coordinate / OUTPUT_DISTANCE_UNIT_M
        return point.coordinate

    def to_dict(self) -> dict:
        points = []
        for k, p in enumerate(self.points):
            item = {"coordinate": self.output_coordinate(p), "score": p.score, "support": p.support}
            if self.bins:
                item["lower_m"] = self.bins[k].lower
                item["upper_m"] = self.bins[k].upper
            points.append(item)
        return {
            "axis": self.axis,
            "unit": "10km" if self.axis == DISTANCE_AXIS else "day",
            "normalized": self.normalized,
            "degenerate": self.degenerate,
            "points": points,
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["coordinate", "score", "support"])
        for p in self.points:
            score = "null" if p.score is None else repr(p.score)
            writer.writerow([repr(self.output_coordinate(p)), score, p.support])
        return out.getvalue()


def _matrix(field: SpatioTemporalField) -> np.ndarray:
    return np.asarray(field.counts, dtype=np.float64)


def cell_mean(field: SpatioTemporalField, cell_index: int) -> CellStats:
    row = _matrix(field)[cell_index]
    return CellStats(field.cells[cell_index], float(row.sum() / row.size))


def _check_lag(field, lag):
    if not 0 <= lag < field.n_bins:
        raise RelevanceError(f"lag {lag} outside [0, {field.n_bins})")


def temporal_self_relevance(field: SpatioTemporalField, cell_index: int, lag: int) -> float:
    _check_lag(field, lag)
    row = _matrix(field)[cell_index]
    dev = row - row.mean()
    n = row.size
    return float((dev[lag:] * dev[: n - lag]).sum() / (n - lag))


def pair_spatial_relevance(field: SpatioTemporalField, i: int, j: int) -> float:
    y = _matrix(field)
    if i > j:
        i, j = j, i
    di = y[i] - y[i].mean()
    dj = y[j] - y[j].mean()
    return float((di * dj).sum() / y.shape[1])


def _lagged_gram(dev: np.ndarray, weights: np.ndarray, threads: int) -> np.ndarray:
    """``G[t, s] = sum_i w_i dev[i, t] dev[i, s]``, accumulated over fixed cell blocks."""
    n, t = dev.shape
    step = max(1, _GRAM_BLOCK // max(1, t))
    starts = list(range(0, n, step))

    def work(start):
        block = dev[start:start + step]
        return (block * weights[start:start + step, None]).T @ block

    with threadpool_limits(1):
        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, starts))
        else:
            parts = [work(s) for s in starts]
    # fixed reduction order keeps serial and threaded runs identical
    gram = np.zeros((t, t))
    for part in parts:
        gram += part
    return gram


def global_temporal_relevance(
    field: SpatioTemporalField, max_lag: int, normalize: bool = False, threads: int = 1
) -> RelevanceCurve:
    """Rate-weighted average of per-cell lagged self-relevance for lags 0..max_lag.

    With ``normalize`` the curve is divided by its lag-0 value and cells with
    zero variance are left out.  Points are missing when no cell carries
    weight; every point is missing when the field is flat.
    """
    if max_lag < 0 or max_lag >= field.n_bins:
        raise RelevanceError(f"max_lag must lie in [0, {field.n_bins}); got {max_lag}")
    y = _matrix(field)
    mu = y.mean(axis=1)
    dev = y - mu[:, None]
    active = mu > 0
    if normalize:
        active &= (dev * dev).sum(axis=1) > 0
    dev, weights = dev[active], mu[active]
    n_active = int(active.sum())
    days = field.grid.bin_width.days
    lags = list(range(max_lag + 1))

    if n_active == 0:
        points = tuple(CurvePoint(float(l * days), None, 0) for l in lags)
        return RelevanceCurve(LAG_AXIS, points, normalize)

    n = field.n_bins
    gram = _lagged_gram(dev, weights, threads)
    sums = np.array([np.diagonal(gram, -lag).sum() / (n - lag) for lag in lags])
    scores = sums / weights.sum()

    if normalize:
        base = scores[0]
        if not base > 0:
            points = tuple(CurvePoint(float(l * days), None, 0) for l in lags)
            return RelevanceCurve(LAG_AXIS, points, normalize)
        scores = scores / base
        scores[0] = 1.0
    points = tuple(
        CurvePoint(float(l * days), float(s), n_active * (n - l)) for l, s in zip(lags, scores)
    )
    return RelevanceCurve(LAG_AXIS, points, normalize)


def distance_bins(bin_width: float, max_distance: float) -> tuple:
    if not bin_width > 0:
        raise RelevanceError("bin_width must be positive")
    if not max_distance > 0:
        raise RelevanceError("max_distance must be positive")
    count = int(np.ceil(max_distance / bin_width))
    return tuple(DistanceBin(k * bin_width, min((k + 1) * bin_width, max_distance)) for k in range(count))


def _pair_block(start, stop, dev, weights, lat, lon, n_bins, bin_width, max_distance):
    """Accumulate weighted covariance over pairs (i, j) with start <= i < stop, j > i."""
    t = dev.shape[1]
    rows = slice(start, stop)
    cov = dev[rows] @ dev[start:].T / t
    dist = haversine(lat[rows, None], lon[rows, None], lat[None, start:], lon[None, start:])
    upper = np.arange(start, stop)[:, None] < np.arange(start, len(lat))[None, :]
    keep = upper & (dist < max_distance)
    w = (weights[rows, None] * weights[None, start:])[keep]
    k = np.minimum((dist[keep] // bin_width).astype(np.int64), n_bins - 1)
    return (
        np.bincount(k, weights=w * cov[keep], minlength=n_bins),
        np.bincount(k, weights=w, minlength=n_bins),
        np.bincount(k, minlength=n_bins),
    )


def global_spatial_relevance(
    field: SpatioTemporalField,
    bin_width: float = 1000.0,
    max_distance: float = 30_000.0,
    normalize: bool = False,
    threads: int = 1,
) -> RelevanceCurve:
    """Rate-product-weighted average pair relevance per distance bin.

    Pairs are unordered pairs of distinct cells closer than ``max_distance``.
    With ``normalize`` the scores are divided by the rate-weighted mean cell
    variance, and zero-variance cells are left out.
    """
    bins = distance_bins(bin_width, max_distance)
    y = _matrix(field)
    mu = y.mean(axis=1)
    dev = y - mu[:, None]
    var = (dev * dev).sum(axis=1) / y.shape[1]
    active = mu > 0
    if normalize:
        active &= var > 0
    idx = np.flatnonzero(active)
    dev, weights, var = dev[idx], mu[idx], var[idx]
    lat = np.array([field.cells[i].centroid_lat for i in idx], dtype=float)
    lon = np.array([field.cells[i].centroid_lon for i in idx], dtype=float)
    n = len(idx)
    n_bins = len(bins)

    num = np.zeros(n_bins)
    den = np.zeros(n_bins)
    pairs = np.zeros(n_bins, dtype=np.int64)
    if n >= 2:
        step = max(1, _PAIR_BLOCK // n)
        starts = list(range(0, n, step))

        def work(start):
            return _pair_block(start, min(start + step, n), dev, weights, lat, lon, n_bins, bin_width, max_distance)

        with threadpool_limits(1):
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    results = list(pool.map(work, starts))
            else:
                results = [work(s) for s in starts]
        # fixed reduction order keeps serial and threaded runs identical
        for a, b, c in results:
            num += a
            den += b
            pairs += c

    scale = 1.0
    if normalize and n:
        scale = float((weights * var).sum() / weights.sum())
    t = y.shape[1]
    points = []
    for k, b in enumerate(bins):
        if pairs[k] == 0 or den[k] == 0:
            points.append(CurvePoint(b.representative, None, 0))
        else:
            points.append(CurvePoint(b.representative, float(num[k] / den[k] / scale), int(pairs[k]) * t))
    return RelevanceCurve(DISTANCE_AXIS, tuple(points), normalize, bins)
