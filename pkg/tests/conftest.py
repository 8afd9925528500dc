from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from urbangrid.aggregation import SpatioTemporalField
from urbangrid.core import DAY, EventDataset, EventRecord, GridCell, Records, SourceChannel, TimeGrid
from urbangrid.ingestion import derive_cells

T0 = datetime(2015, 1, 1, tzinfo=timezone.utc)
MOBILE = SourceChannel.MOBILE_DEVICE
HOTLINE = SourceChannel.HOTLINE


def make_field(counts, coords=None, bin_width=DAY):
    counts = np.asarray(counts, dtype=np.int64)
    n, t = counts.shape
    if coords is None:
        coords = [(31.0 + 0.01 * i, 121.0) for i in range(n)]
    cells = tuple(GridCell(f"c{i:03d}", float(a), float(b)) for i, (a, b) in enumerate(coords))
    return SpatioTemporalField(TimeGrid(T0, bin_width, t), cells, counts)


def event(event_id, cell_id="c1", when=T0, lat=31.2, lon=121.5, source=MOBILE, category="Greening", **kw):
    return EventRecord(event_id=event_id, cell_id=cell_id, reported_at=when, latitude=lat, longitude=lon,
                       source=source, category=category, **kw)


def make_dataset(records, window=None):
    recs = Records.from_records(records)
    if window is None:
        window = (T0, T0 + timedelta(days=365))
    return EventDataset(recs, derive_cells(recs.frame), window)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
