"""Parsing, validation and cleaning of raw event files; source/category summaries."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from .core import (
    SOURCES,
    EventDataset,
    EventRecord,
    GridCell,
    Records,
    SourceChannel,
    format_timestamp,
    from_epoch,
    parse_timestamp,
    to_epoch,
    valid_coordinates,
)

FIELDS = (
    "event_id", "cell_id", "source", "category", "reported_at", "resolved_at",
    "latitude", "longitude", "priority", "description",
)
REQUIRED = ("event_id", "cell_id", "source", "category", "reported_at", "latitude", "longitude")
FORMATS = ("csv", "jsonl")

_FAST_TS_FORMAT = "%Y-%m-%dT%H:%M:%S%z"
_FLOAT_RE = r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$"


class IngestError(Exception):
    """Stream-level failure: the input as a whole cannot be read."""


class RejectReason(str, enum.Enum):
    MALFORMED_ROW = "MalformedRow"
    BAD_TIMESTAMP = "BadTimestamp"
    BAD_COORDINATE = "BadCoordinate"
    DUPLICATE_ID = "DuplicateId"
    OUT_OF_WINDOW = "OutOfWindow"
    MISSING_FIELD = "MissingField"


@dataclass(frozen=True)
class RawRecordError:
    line_number: int
    reason: RejectReason
    detail: str

    def to_dict(self) -> dict:
        return {"line_number": self.line_number, "reason": self.reason.value, "detail": self.detail}


# ---------------------------------------------------------------------------
# parsing


def parse_events(stream: BinaryIO, format: str = "csv") -> tuple[Records, list[RawRecordError]]:
    """Parse a byte stream of events.

    Every non-blank data row ends up either as a record or as exactly one
    :class:`RawRecordError`; row problems never abort the parse.  Returns the
    records in input order and the errors ordered by line number.

    Raises :class:`IngestError` when the stream itself is unusable (unreadable,
    not UTF-8, missing header columns).
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if isinstance(stream, (bytes, bytearray)):
        data = bytes(stream)
    else:
        try:
            data = stream.read()
        except OSError as exc:
            raise IngestError(f"cannot read input: {exc}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(f"input is not valid UTF-8: {exc}") from exc
    if data.startswith(b"\xef\xbb\xbf"):
        data, text = data[3:], text[1:]

    if format == "csv":
        parsed = _read_csv_arrow(data)
        if parsed is None:
            parsed = _read_csv_python(text)
    else:
        parsed = _read_jsonl(text)
    lines, columns, errors = parsed

    frame, row_errors = _validate(lines, columns)
    errors = sorted(errors + row_errors, key=lambda e: e.line_number)
    return Records(frame), errors


def _check_header(header) -> None:
    missing = [f for f in REQUIRED if f not in header]
    if missing:
        raise IngestError(f"header lacks required columns: {', '.join(missing)}")


def _physical_lines(data: bytes) -> np.ndarray:
    """1-based numbers of the non-blank physical lines."""
    buf = np.frombuffer(data, dtype=np.uint8)
    ends = np.flatnonzero(buf == 10)
    starts = np.concatenate([[0], ends + 1])
    stops = np.concatenate([ends, [len(buf)]])
    length = stops - starts
    cr_only = (length == 1) & (buf[np.minimum(starts, max(len(buf) - 1, 0))] == 13) if len(buf) else length > 0
    blank = (length == 0) | cr_only
    return np.flatnonzero(~blank) + 1


def _read_csv_arrow(data: bytes):
    """Fast path; returns None when a quoted field spans several lines."""
    if not data.strip():
        raise IngestError("empty input: header row required")
    try:
        header_table = pacsv.read_csv(
            io.BytesIO(data.split(b"\n", 1)[0] + b"\n"),
            read_options=pacsv.ReadOptions(use_threads=False, autogenerate_column_names=True),
        )
        header = [str(v[0]).strip() for v in header_table.to_pydict().values()]
    except pa.ArrowInvalid as exc:
        raise IngestError(f"unreadable header: {exc}") from exc
    _check_header(header)
    if len(set(header)) != len(header):
        raise IngestError("duplicate header columns")

    invalid = []

    def on_invalid(row):
        invalid.append((row.number, row.actual_columns, row.expected_columns))
        return "skip"

    try:
        table = pacsv.read_csv(
            io.BytesIO(data),
            read_options=pacsv.ReadOptions(use_threads=False, column_names=header, skip_rows=1),
            parse_options=pacsv.ParseOptions(newlines_in_values=True, invalid_row_handler=on_invalid),
            convert_options=pacsv.ConvertOptions(
                column_types={h: pa.string() for h in header}, strings_can_be_null=False,
                quoted_strings_can_be_null=False),
        )
    except pa.ArrowInvalid as exc:
        raise IngestError(f"unreadable delimited text: {exc}") from exc

    physical = _physical_lines(data)
    n_rows = table.num_rows + len(invalid)
    if n_rows + 1 != len(physical):
        return None
    # arrow numbers logical rows from 1 with the skipped header as row 1
    bad_ordinals = np.array([num for num, _, _ in invalid], dtype=np.int64)
    ordinals = np.arange(2, n_rows + 2)
    good = np.setdiff1d(ordinals, bad_ordinals, assume_unique=True)
    errors = [
        RawRecordError(int(physical[num - 1]), RejectReason.MALFORMED_ROW, f"expected {exp} fields, found {act}")
        for num, act, exp in invalid
    ]
    columns = {f: table.column(f) if f in header else None for f in FIELDS}
    return physical[good - 1], columns, errors


def _read_csv_python(text: str):
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IngestError("empty input: header row required") from None
    except csv.Error as exc:
        raise IngestError(f"unreadable delimited text: {exc}") from exc
    _check_header(header)
    width = len(header)
    positions = {f: header.index(f) for f in FIELDS if f in header}

    lines, rows, errors = [], [], []
    last = reader.line_num
    try:
        for row in reader:
            start, last = last + 1, reader.line_num
            if not row:
                continue
            if len(row) != width:
                errors.append(RawRecordError(start, RejectReason.MALFORMED_ROW,
                                             f"expected {width} fields, found {len(row)}"))
            else:
                lines.append(start)
                rows.append(row)
    except csv.Error as exc:
        raise IngestError(f"unreadable delimited text: {exc}") from exc
    return np.asarray(lines, dtype=np.int64), _transpose(rows, positions), errors


def _transpose(rows, positions):
    cols = list(zip(*rows)) if rows else []
    return {f: pa.chunked_array([pa.array(cols[positions[f]] if rows else [], type=pa.string())])
            if f in positions else None for f in FIELDS}


def _read_jsonl(text: str):
    lines, rows, errors = [], [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            errors.append(RawRecordError(number, RejectReason.MALFORMED_ROW, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            errors.append(RawRecordError(number, RejectReason.MALFORMED_ROW, "line is not a JSON object"))
            continue
        values = [_json_text(obj.get(f)) for f in FIELDS]
        if None in values:
            errors.append(RawRecordError(number, RejectReason.MALFORMED_ROW, "field values must be strings or numbers"))
            continue
        lines.append(number)
        rows.append(values)
    return np.asarray(lines, dtype=np.int64), _transpose(rows, {f: i for i, f in enumerate(FIELDS)}), errors


def _json_text(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return None
    if isinstance(value, str):
        return value
    if isinstance(value, (int, float)):
        return repr(value)
    return None


def _parse_times(col: pa.ChunkedArray, given: np.ndarray):
    """Epoch seconds and ok mask for an ISO 8601 column with explicit offsets."""
    n = len(col)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    parsed = pc.strptime(col, format=_FAST_TS_FORMAT, unit="s", error_is_null=True)
    ok = parsed.is_valid().to_numpy(zero_copy_only=False)
    epoch = pc.cast(parsed, pa.int64()).fill_null(0).to_numpy(zero_copy_only=False).astype(np.int64)
    for i in np.flatnonzero(given & ~ok):
        try:
            epoch[i] = to_epoch(parse_timestamp(col[int(i)].as_py()))
            ok[i] = True
        except (ValueError, OverflowError):
            pass
    return epoch, ok


def _parse_floats(col) -> np.ndarray:
    """Correctly rounded decimal parse; anything non-numeric becomes NaN."""
    trimmed = pc.utf8_trim_whitespace(col)
    ok = pc.match_substring_regex(trimmed, _FLOAT_RE)
    out = np.full(len(col), np.nan)
    mask = np.asarray(ok.to_numpy(zero_copy_only=False), dtype=bool)
    if mask.any():
        out[mask] = pc.cast(pc.filter(trimmed, ok), pa.float64()).to_numpy(zero_copy_only=False)
    return out


def _validate(lines: np.ndarray, columns: dict):
    """Vectorized row checks; the first failing check names the reason."""
    n = len(lines)
    blank = pa.array([""] * n, type=pa.string())
    cols = {f: (pa.chunked_array([blank]) if c is None else c) for f, c in columns.items()}
    reason = np.full(n, None, dtype=object)
    detail = np.full(n, "", dtype=object)

    def text(f, i):
        return cols[f][int(i)].as_py()

    def reject(mask, why, message):
        fresh = mask & (reason == None)  # noqa: E711 - elementwise
        reason[fresh] = why
        if callable(message):
            for i in np.flatnonzero(fresh):
                detail[i] = message(i)
        else:
            detail[fresh] = message

    def arr(x):
        return np.asarray(x.to_numpy(zero_copy_only=False), dtype=bool)

    for f in REQUIRED:
        empty = arr(pc.equal(pc.utf8_trim_whitespace(cols[f]), ""))
        reject(empty, RejectReason.MISSING_FIELD, f"missing {f}")

    source = np.full(n, -1, dtype=np.int8)
    for s in SOURCES:
        source[arr(pc.equal(cols["source"], s.value))] = s.code
    reject(source < 0, RejectReason.MALFORMED_ROW, lambda i: f"unknown source {text('source', i)!r}")

    prio_text = pc.utf8_trim_whitespace(cols["priority"])
    prio_given = arr(pc.not_equal(prio_text, ""))
    prio_ok = arr(pc.match_substring_regex(prio_text, r"^[+-]?\d{1,18}$"))
    reject(prio_given & ~prio_ok, RejectReason.MALFORMED_ROW,
           lambda i: f"priority {text('priority', i)!r} is not an integer")
    prio_values = np.zeros(n, dtype=np.int64)
    if prio_ok.any():
        prio_values[prio_ok] = pc.cast(pc.filter(prio_text, pa.array(prio_ok)), pa.int64()).to_numpy(
            zero_copy_only=False)

    rep_given = ~arr(pc.equal(cols["reported_at"], ""))
    reported, rep_ok = _parse_times(cols["reported_at"], rep_given)
    reject(~rep_ok, RejectReason.BAD_TIMESTAMP, lambda i: f"bad reported_at {text('reported_at', i)!r}")
    res_given = ~arr(pc.equal(pc.utf8_trim_whitespace(cols["resolved_at"]), ""))
    resolved, res_ok = _parse_times(cols["resolved_at"], res_given)
    reject(res_given & ~res_ok, RejectReason.BAD_TIMESTAMP, lambda i: f"bad resolved_at {text('resolved_at', i)!r}")
    reject(res_given & res_ok & rep_ok & (resolved < reported), RejectReason.BAD_TIMESTAMP,
           "resolved_at precedes reported_at")

    lat = _parse_floats(cols["latitude"])
    lon = _parse_floats(cols["longitude"])
    reject(~valid_coordinates(lat, lon), RejectReason.BAD_COORDINATE,
           lambda i: f"bad coordinate ({text('latitude', i)}, {text('longitude', i)})")

    ids = cols["event_id"].to_numpy()
    ok = reason == None  # noqa: E711
    dup = np.zeros(n, dtype=bool)
    dup[ok] = pd.Series(ids[ok]).duplicated(keep="first").to_numpy()
    reject(dup, RejectReason.DUPLICATE_ID, lambda i: f"duplicate event_id {ids[i]!r}")
    ok = reason == None  # noqa: E711

    keep = pa.array(ok)
    resolved_col = pd.array(resolved[ok], dtype="Int64")
    resolved_col[~res_given[ok]] = pd.NA
    priority_col = pd.array(prio_values[ok], dtype="Int64")
    priority_col[~prio_given[ok]] = pd.NA
    desc = pc.filter(cols["description"], keep).to_numpy()
    desc = np.where(desc == "", None, desc)
    frame = pd.DataFrame({
        "event_id": ids[ok],
        "cell_id": pc.filter(cols["cell_id"], keep).to_numpy(),
        "source": source[ok],
        "category": pc.filter(cols["category"], keep).to_numpy(),
        "reported_at": reported[ok],
        "resolved_at": resolved_col,
        "latitude": lat[ok],
        "longitude": lon[ok],
        "priority": priority_col,
        "description": desc.astype(object),
        "line": np.asarray(lines, dtype=np.int64)[ok],
    })
    errors = [RawRecordError(int(lines[i]), reason[i], detail[i]) for i in np.flatnonzero(~ok)]
    return frame, errors


# ---------------------------------------------------------------------------
# cleaning


def clean(records, window: tuple, cells: Optional[Iterable[GridCell]] = None) -> EventDataset:
    """Keep records with valid coordinates, in-window times and unique ids."""
    return clean_report(records, window, cells)[0]


def clean_report(records, window: tuple, cells: Optional[Iterable[GridCell]] = None):
    """Like :func:`clean` but also returns one error per dropped record."""
    start, end = window
    if not start < end:
        raise ValueError("window start must precede window end")
    records = Records.from_records(records) if not isinstance(records, Records) else records
    frame = records.frame
    lo, hi = to_epoch(start), to_epoch(end)

    reason = np.full(len(frame), None, dtype=object)
    coords_ok = valid_coordinates(frame["latitude"].to_numpy(), frame["longitude"].to_numpy())
    reason[~coords_ok] = RejectReason.BAD_COORDINATE
    t = frame["reported_at"].to_numpy()
    outside = (t < lo) | (t >= hi)
    reason[outside & (reason == None)] = RejectReason.OUT_OF_WINDOW  # noqa: E711
    ok = reason == None  # noqa: E711
    dup = np.zeros(len(frame), dtype=bool)
    dup[ok] = frame["event_id"][ok].duplicated(keep="first").to_numpy()
    reason[dup] = RejectReason.DUPLICATE_ID
    ok = reason == None  # noqa: E711

    kept = frame[ok].reset_index(drop=True)
    lines = frame["line"].to_numpy()
    errors = [RawRecordError(int(lines[i]), reason[i], _clean_detail(reason[i], frame, i))
              for i in np.flatnonzero(~ok)]
    dataset = EventDataset(
        records=Records(kept),
        cells=derive_cells(kept, cells),
        window=(start, end),
        rejected_count=int((~ok).sum()),
    )
    return dataset, errors


def _clean_detail(reason, frame, i):
    if reason is RejectReason.OUT_OF_WINDOW:
        return f"reported_at {format_timestamp(from_epoch(frame['reported_at'].iat[i]))} outside window"
    if reason is RejectReason.DUPLICATE_ID:
        return f"duplicate event_id {frame['event_id'].iat[i]!r}"
    return f"bad coordinate ({frame['latitude'].iat[i]}, {frame['longitude'].iat[i]})"


def derive_cells(frame: pd.DataFrame, registry: Optional[Iterable[GridCell]] = None) -> tuple:
    """One :class:`GridCell` per cell id present, sorted by id.

    Registry entries win; other cells get the mean member coordinate.
    """
    if not len(frame):
        return ()
    means = frame.groupby("cell_id", sort=True)[["latitude", "longitude"]].mean()
    known = {c.cell_id: c for c in registry} if registry is not None else {}
    return tuple(
        known.get(cid) or GridCell(cid, float(lat), float(lon))
        for cid, lat, lon in zip(means.index, means["latitude"], means["longitude"])
    )


# ---------------------------------------------------------------------------
# summary


@dataclass(frozen=True)
class SummaryRow:
    source: SourceChannel
    category: str
    count: int
    percent_of_total: float


@dataclass(frozen=True)
class SourceCategorySummary:
    rows: tuple
    total: int
    source_totals: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "sources": [
                {"source": s.value, "count": c, "percent_of_total": p} for s, c, p in self.source_totals
            ],
            "rows": [
                {"source": r.source.value, "category": r.category, "count": r.count,
                 "percent_of_total": r.percent_of_total}
                for r in self.rows
            ],
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["source", "category", "count", "percent_of_total"])
        for r in self.rows:
            writer.writerow([r.source.value, r.category, r.count, repr(r.percent_of_total)])
        return out.getvalue()

    def render(self) -> str:
        """Human-readable table, percentages rounded half-up to one decimal."""
        lines = [f"{'Source':<14}{'%':>7}  {'Category':<40}{'Count':>10}{'%':>7}"]
        for source, count, pct in self.source_totals:
            first = True
            for r in self.rows:
                if r.source is not source:
                    continue
                head = f"{source.value:<14}{round_half_up(pct):>7}" if first else " " * 21
                lines.append(f"{head}  {r.category:<40}{r.count:>10}{round_half_up(r.percent_of_total):>7}")
                first = False
        lines.append(f"total records: {self.total}")
        return "\n".join(lines)


def round_half_up(value: float, places: int = 1) -> str:
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def summarize(dataset: EventDataset) -> SourceCategorySummary:
    frame = dataset.frame
    total = len(frame)
    if total == 0:
        return SourceCategorySummary(rows=(), total=0, source_totals=())
    counts = frame.groupby(["source", "category"], sort=False).size()
    ordered = sorted(counts.items(), key=lambda kv: (int(kv[0][0]), -int(kv[1]), kv[0][1]))
    rows = tuple(
        SummaryRow(SOURCES[int(code)], cat, int(n), 100.0 * int(n) / total) for (code, cat), n in ordered
    )
    per_source = np.bincount(frame["source"].to_numpy(), minlength=len(SOURCES))
    source_totals = tuple(
        (s, int(per_source[s.code]), 100.0 * int(per_source[s.code]) / total)
        for s in SOURCES if per_source[s.code]
    )
    return SourceCategorySummary(rows=rows, total=total, source_totals=source_totals)


# ---------------------------------------------------------------------------
# canonical writers


def records_to_csv(records, out) -> None:
    """Write records in the canonical delimited-text schema.

    ``out`` is a path or a binary file object.  Floats are written as
    shortest round-trip decimals.
    """
    frame = records.frame if isinstance(records, Records) else records
    pacsv.write_csv(canonical_table(frame), out, write_options=pacsv.WriteOptions(quoting_style="needed"))


def _stamps(values: pd.Series) -> pa.Array:
    mask = values.isna().to_numpy()
    secs = values.fillna(0).to_numpy(dtype=np.int64)
    text = np.char.add(np.datetime_as_string(secs.astype("datetime64[s]"), unit="s"), "+00:00")
    return pa.array(np.where(mask, "", text), type=pa.string())


def canonical_table(frame: pd.DataFrame) -> pa.Table:
    prio = frame["priority"]
    prio_text = np.where(prio.isna().to_numpy(), "", prio.fillna(0).to_numpy(dtype=np.int64).astype(str))
    source_names = np.asarray([s.value for s in SOURCES], dtype=object)
    return pa.table({
        "event_id": pa.array(frame["event_id"].to_numpy(), type=pa.string()),
        "cell_id": pa.array(frame["cell_id"].to_numpy(), type=pa.string()),
        "source": pa.array(source_names[frame["source"].to_numpy(dtype=np.int64)], type=pa.string()),
        "category": pa.array(frame["category"].to_numpy(), type=pa.string()),
        "reported_at": _stamps(frame["reported_at"]),
        "resolved_at": _stamps(frame["resolved_at"]),
        "latitude": pa.array(frame["latitude"].to_numpy(dtype=float)),
        "longitude": pa.array(frame["longitude"].to_numpy(dtype=float)),
        "priority": pa.array(prio_text, type=pa.string()),
        "description": pa.array(frame["description"].fillna("").to_numpy(), type=pa.string()),
    })


def records_to_jsonl(records, out) -> None:
    """Write records as JSON lines with the canonical field names (text mode ``out``)."""
    frame = records.frame if isinstance(records, Records) else records
    table = canonical_table(frame).to_pydict()
    for i in range(len(frame)):
        row = {f: table[f][i] for f in FIELDS}
        for f in ("resolved_at", "priority", "description"):
            if row[f] == "":
                row[f] = None
        if row["priority"] is not None:
            row["priority"] = int(row["priority"])
        out.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_cells(path) -> list[GridCell]:
    """Read a cell registry (cell_id, centroid_lat, centroid_lon)."""
    table = pd.read_csv(path, dtype={"cell_id": str})
    return [GridCell(str(c), float(a), float(b))
            for c, a, b in zip(table["cell_id"], table["centroid_lat"], table["centroid_lon"])]


def write_cells(cells: Sequence[GridCell], out) -> None:
    pd.DataFrame({
        "cell_id": [c.cell_id for c in cells],
        "centroid_lat": [c.centroid_lat for c in cells],
        "centroid_lon": [c.centroid_lon for c in cells],
    }).to_csv(out, index=False, lineterminator="\n")


def record_from_dict(d: dict) -> EventRecord:
    """Convenience constructor used by tests and small scripts."""
    return EventRecord(
        event_id=d["event_id"], cell_id=d["cell_id"], reported_at=parse_timestamp(d["reported_at"]),
        latitude=float(d["latitude"]), longitude=float(d["longitude"]),
        source=SourceChannel(d["source"]), category=d["category"],
        resolved_at=parse_timestamp(d["resolved_at"]) if d.get("resolved_at") else None,
        priority=int(d["priority"]) if d.get("priority") not in (None, "") else None,
        description=d.get("description") or None,
    )
