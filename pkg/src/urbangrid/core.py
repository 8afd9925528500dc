"""Domain types shared across the package, plus great-circle cell distance.

Records are held column-wise (see :class:`Records`) so million-row datasets
stay cheap; :class:`EventRecord` objects are materialized on access.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

EARTH_RADIUS_M = 6_371_000.0
DAY = timedelta(days=1)
WEEK = timedelta(days=7)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class SourceChannel(str, enum.Enum):
    MOBILE_DEVICE = "MobileDevice"
    HOTLINE = "Hotline"

    @classmethod
    def parse(cls, value: str) -> "SourceChannel":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown source channel {value!r}") from None

    @property
    def code(self) -> int:
        return SOURCE_CODES[self]


SOURCES = (SourceChannel.MOBILE_DEVICE, SourceChannel.HOTLINE)
SOURCE_CODES = {s: i for i, s in enumerate(SOURCES)}


def check_category(name: str) -> str:
    if not isinstance(name, str) or not name.strip():
        raise ValueError(f"invalid category name {name!r}")
    return name


def to_utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {ts.isoformat()} has no UTC offset")
    return ts.astimezone(timezone.utc)


def to_epoch(ts: datetime) -> int:
    return int((to_utc(ts) - EPOCH) // timedelta(seconds=1))


def from_epoch(seconds: int) -> datetime:
    return EPOCH + timedelta(seconds=int(seconds))


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO 8601 timestamp with an explicit offset into UTC."""
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        # fromisoformat before 3.11 rejects e.g. one-digit fractions
        try:
            ts = pd.Timestamp(text).to_pydatetime()
        except (ValueError, TypeError):
            raise ValueError(f"unparseable timestamp {text!r}") from None
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {text!r} lacks an explicit offset")
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return to_utc(ts).strftime("%Y-%m-%dT%H:%M:%S+00:00")


@dataclass(frozen=True)
class EventRecord:
    event_id: str
    cell_id: str
    reported_at: datetime
    latitude: float
    longitude: float
    source: SourceChannel
    category: str
    resolved_at: Optional[datetime] = None
    priority: Optional[int] = None
    description: Optional[str] = None

    def __post_init__(self):
        if not self.event_id:
            raise ValueError("event_id must be non-empty")
        if not self.cell_id:
            raise ValueError("cell_id must be non-empty")
        check_category(self.category)
        object.__setattr__(self, "source", SourceChannel(self.source))
        object.__setattr__(self, "reported_at", to_utc(self.reported_at).replace(microsecond=0))
        if self.resolved_at is not None:
            object.__setattr__(self, "resolved_at", to_utc(self.resolved_at).replace(microsecond=0))
            if self.resolved_at < self.reported_at:
                raise ValueError("resolved_at precedes reported_at")
        if not valid_coordinates(self.latitude, self.longitude):
            raise ValueError(f"coordinates out of range: ({self.latitude}, {self.longitude})")


def valid_coordinates(lat, lon):
    """Elementwise WGS84 range check; NaN is invalid."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    ok = (lat >= -90.0) & (lat <= 90.0) & (lon >= -180.0) & (lon <= 180.0)
    return bool(ok) if ok.ndim == 0 else ok


@dataclass(frozen=True)
class GridCell:
    cell_id: str
    centroid_lat: float
    centroid_lon: float


@dataclass(frozen=True)
class TimeGrid:
    """Contiguous half-open bins ``[origin + k*w, origin + (k+1)*w)``."""

    origin: datetime
    bin_width: timedelta
    bin_count: int

    def __post_init__(self):
        object.__setattr__(self, "origin", to_utc(self.origin))
        if self.bin_width not in (DAY, WEEK):
            raise ValueError("bin_width must be one day or seven days")
        if self.bin_count < 1:
            raise ValueError("bin_count must be positive")

    @classmethod
    def covering(cls, start: datetime, end: datetime, bin_width: timedelta) -> "TimeGrid":
        span = to_utc(end) - to_utc(start)
        if span <= timedelta(0):
            raise ValueError("window must be non-empty")
        count = -(-span // bin_width)
        return cls(start, bin_width, int(count))

    @property
    def width_seconds(self) -> int:
        return int(self.bin_width.total_seconds())

    @property
    def origin_epoch(self) -> int:
        return to_epoch(self.origin)

    def bin_index(self, ts: datetime) -> int:
        idx = (to_utc(ts) - self.origin) // self.bin_width
        if not 0 <= idx < self.bin_count:
            raise ValueError(f"{ts.isoformat()} lies outside the time grid")
        return int(idx)

    def bin_indices(self, epoch_seconds: np.ndarray) -> np.ndarray:
        return (np.asarray(epoch_seconds, dtype=np.int64) - self.origin_epoch) // self.width_seconds

    def bin_start(self, index: int) -> datetime:
        return self.origin + index * self.bin_width


# Columns of the in-memory record table.  Timestamps are int64 epoch seconds
# (UTC); ``resolved_at`` and ``priority`` use pandas nullable Int64.
RECORD_COLUMNS = (
    "event_id", "cell_id", "source", "category", "reported_at", "resolved_at",
    "latitude", "longitude", "priority", "description", "line",
)


def empty_frame() -> pd.DataFrame:
    return pd.DataFrame({
        "event_id": pd.Series([], dtype=object),
        "cell_id": pd.Series([], dtype=object),
        "source": pd.Series([], dtype=np.int8),
        "category": pd.Series([], dtype=object),
        "reported_at": pd.Series([], dtype=np.int64),
        "resolved_at": pd.Series([], dtype="Int64"),
        "latitude": pd.Series([], dtype=float),
        "longitude": pd.Series([], dtype=float),
        "priority": pd.Series([], dtype="Int64"),
        "description": pd.Series([], dtype=object),
        "line": pd.Series([], dtype=np.int64),
    })


class Records(Sequence):
    """Ordered, immutable sequence of :class:`EventRecord` backed by a DataFrame.

    ``source`` is stored as a small integer code (index into ``SOURCES``);
    ``line`` is the input line number a record came from, 0 when unknown.
    """

    def __init__(self, frame: Optional[pd.DataFrame] = None):
        if frame is None:
            frame = empty_frame()
        missing = set(RECORD_COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"record frame lacks columns {sorted(missing)}")
        self._frame = frame.loc[:, list(RECORD_COLUMNS)].reset_index(drop=True)

    @classmethod
    def from_records(cls, records: Sequence[EventRecord], lines: Optional[Sequence[int]] = None) -> "Records":
        if isinstance(records, Records):
            return records
        if not records:
            return cls()
        if lines is None:
            lines = [0] * len(records)
        frame = pd.DataFrame({
            "event_id": pd.Series([r.event_id for r in records], dtype=object),
            "cell_id": pd.Series([r.cell_id for r in records], dtype=object),
            "source": np.array([SourceChannel(r.source).code for r in records], dtype=np.int8),
            "category": pd.Series([r.category for r in records], dtype=object),
            "reported_at": np.array([to_epoch(r.reported_at) for r in records], dtype=np.int64),
            "resolved_at": pd.array(
                [None if r.resolved_at is None else to_epoch(r.resolved_at) for r in records], dtype="Int64"),
            "latitude": np.array([r.latitude for r in records], dtype=float),
            "longitude": np.array([r.longitude for r in records], dtype=float),
            "priority": pd.array([r.priority for r in records], dtype="Int64"),
            "description": pd.Series([r.description for r in records], dtype=object),
            "line": np.asarray(lines, dtype=np.int64),
        })
        return cls(frame)

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame

    def __len__(self) -> int:
        return len(self._frame)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Records(self._frame.iloc[index])
        row = self._frame.iloc[index]
        resolved = row["resolved_at"]
        priority = row["priority"]
        return EventRecord(
            event_id=row["event_id"],
            cell_id=row["cell_id"],
            reported_at=from_epoch(row["reported_at"]),
            latitude=float(row["latitude"]),
            longitude=float(row["longitude"]),
            source=SOURCES[int(row["source"])],
            category=row["category"],
            resolved_at=None if pd.isna(resolved) else from_epoch(resolved),
            priority=None if pd.isna(priority) else int(priority),
            description=row["description"] if isinstance(row["description"], str) else None,
        )

    def __iter__(self) -> Iterator[EventRecord]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Records):
            return NotImplemented
        return self._frame.equals(other._frame)

    def __repr__(self):
        return f"Records(n={len(self)})"


@dataclass(frozen=True)
class EventDataset:
    records: Records
    cells: tuple
    window: tuple
    rejected_count: int = 0

    def __post_init__(self):
        start, end = (to_utc(t) for t in self.window)
        object.__setattr__(self, "window", (start, end))
        object.__setattr__(self, "cells", tuple(self.cells))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def frame(self) -> pd.DataFrame:
        return self.records.frame

    @property
    def window_epoch(self) -> tuple:
        return to_epoch(self.window[0]), to_epoch(self.window[1])

    def cell_index(self) -> dict:
        return {c.cell_id: c for c in self.cells}


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; broadcasts over numpy arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def cell_distance(a: GridCell, b: GridCell) -> float:
    if (a.centroid_lat, a.centroid_lon) == (b.centroid_lat, b.centroid_lon):
        return 0.0
    # order the operands so the result is bitwise symmetric
    p, q = sorted([(a.centroid_lat, a.centroid_lon), (b.centroid_lat, b.centroid_lon)])
    return float(haversine(p[0], p[1], q[0], q[1]))

