"""Command-line pipelines: synth, ingest, summary, temporal, spatial, categories.

Every run writes one output directory holding ``manifest.json`` plus the
named output files.  Outputs are staged in a temporary sibling directory and
moved into place only when the command succeeds, so a failed run never leaves
a partial directory behind.

Exit codes: 0 success, 1 data error, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import hashlib
import json
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

from . import __version__
from .aggregation import filter_dataset, spatial_density, weekly_histogram, build_field
from .category_mi import CategoryError, relevance_matrix
from .core import EventDataset, Records, SourceChannel, format_timestamp, from_epoch, parse_timestamp
from .ingestion import (
    FORMATS,
    IngestError,
    clean_report,
    derive_cells,
    parse_events,
    read_cells,
    records_to_csv,
    records_to_jsonl,
    summarize,
    write_cells,
)
from .relevance import RelevanceError, global_spatial_relevance, global_temporal_relevance
from .synthgen import ConfigError, generate, generator_metadata, load_config

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2

ARCHIVE_META = "dataset.json"
ARCHIVE_DATA = "dataset.csv"
ARCHIVE_CELLS = "cells.csv"
MANIFEST = "manifest.json"

# flags that never change the numbers and so stay out of the config digest
_RUN_ONLY = {"out", "force", "threads", "func"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, ensure_ascii=False) + "\n"


@dataclass
class RunManifest:
    command_line: list
    config_digest: str
    input_digests: dict
    tool_version: str
    started_at: str
    finished_at: Optional[str] = None
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "command_line": self.command_line,
            "config_digest": self.config_digest,
            "input_digests": self.input_digests,
            "tool_version": self.tool_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": self.outputs,
            "warnings": self.warnings,
        }


class RunDir:
    """Staging area for one run's outputs."""

    def __init__(self, out: Path, force: bool):
        self.out = out
        self.force = force
        if out.exists() and not force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        parent = out.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=parent))
        self.files: list = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.stage / name

    def write_text(self, name: str, text: str) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def commit(self, manifest: RunManifest) -> None:
        manifest.outputs = [{"name": n, "sha256": sha256_file(self.stage / n)} for n in sorted(self.files)]
        manifest.finished_at = _now()
        (self.stage / MANIFEST).write_text(_dumps(manifest.to_dict()), encoding="utf-8")
        if self.out.exists():
            shutil.rmtree(self.out) if self.out.is_dir() else self.out.unlink()
        self.stage.rename(self.out)

    def discard(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def config_digest(args: argparse.Namespace, extra: Optional[dict] = None) -> str:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _RUN_ONLY}
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}
    if extra:
        params.update(extra)
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _warn(manifest: RunManifest, message: str) -> None:
    manifest.warnings.append(message)
    print(f"warning: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# loading datasets


def _parse_window(values) -> Optional[tuple]:
    if values is None:
        return None
    try:
        start, end = (parse_timestamp(v) for v in values)
    except ValueError as exc:
        raise UsageError(f"bad --window: {exc}") from None
    if not start < end:
        raise UsageError("--window start must precede end")
    return start, end


def _read_file(path: Path, fmt: str):
    if not path.is_file():
        raise UsageError(f"input file {path} not found")
    try:
        with open(path, "rb") as fh:
            return parse_events(fh, fmt)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except IngestError as exc:
        raise DataError(str(exc)) from None


def infer_window(records: Records) -> tuple:
    """Smallest window holding every record; a one-day window at the epoch when empty."""
    t = records.frame["reported_at"].to_numpy()
    if not len(t):
        start = from_epoch(0)
        return start, start + timedelta(days=1)
    return from_epoch(int(t.min())), from_epoch(int(t.max()) + 1)


def input_paths(path: Path) -> list:
    if path.is_dir():
        return [path / n for n in (ARCHIVE_META, ARCHIVE_DATA, ARCHIVE_CELLS) if (path / n).exists()]
    return [path]


def input_digests(path: Path) -> dict:
    return {str(p): sha256_file(p) for p in input_paths(path)}


def load_archive(path: Path) -> EventDataset:
    meta_path = path / ARCHIVE_META
    if not meta_path.is_file():
        raise UsageError(f"{path} is not a dataset archive (no {ARCHIVE_META})")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        window = tuple(parse_timestamp(t) for t in meta["window"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable archive metadata: {exc}") from None
    records, errors = _read_file(path / ARCHIVE_DATA, "csv")
    if errors:
        raise DataError(f"archive data has {len(errors)} invalid rows (first at line {errors[0].line_number})")
    registry = read_cells(path / ARCHIVE_CELLS) if (path / ARCHIVE_CELLS).is_file() else None
    frame = records.frame
    return EventDataset(records, derive_cells(frame, registry), window, int(meta.get("rejected_count", 0)))


def load_dataset(args) -> EventDataset:
    """An archive directory as is, or a raw file parsed and cleaned."""
    path = Path(args.input)
    if path.is_dir():
        return load_archive(path)
    records, _ = _read_file(path, args.format)
    window = _parse_window(args.window) or infer_window(records)
    registry = read_cells(args.cells) if getattr(args, "cells", None) else None
    return clean_report(records, window, registry)[0]


def write_archive(run: RunDir, dataset: EventDataset, extra: Optional[dict] = None) -> None:
    records_to_csv(dataset.records, str(run.path(ARCHIVE_DATA)))
    with open(run.path(ARCHIVE_CELLS), "w", encoding="utf-8", newline="") as fh:
        write_cells(dataset.cells, fh)
    frame = dataset.frame
    meta = {
        "window": [format_timestamp(t) for t in dataset.window],
        "record_count": len(frame),
        "cell_count": len(dataset.cells),
        "rejected_count": dataset.rejected_count,
        "category_count": int(frame["category"].nunique()),
    }
    if extra:
        meta.update(extra)
    run.write_text(ARCHIVE_META, _dumps(meta))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, run: RunDir, manifest: RunManifest) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    manifest.config_digest = config_digest(args, {"generator_config": config.digest()})
    dataset = generate(config)
    write_archive(run, dataset, {"generator": generator_metadata(config)})
    if args.format == "jsonl":
        with open(run.path("dataset.jsonl"), "w", encoding="utf-8", newline="") as fh:
            records_to_jsonl(dataset.records, fh)
    run.write_text("generator.json", _dumps({"config": config.to_dict(), **generator_metadata(config)}))
    print(f"generated {len(dataset)} events over {len(dataset.cells)} cells")
    return EXIT_OK


def cmd_ingest(args, run: RunDir, manifest: RunManifest) -> int:
    path = Path(args.input)
    records, errors = _read_file(path, args.format)
    window = _parse_window(args.window) or infer_window(records)
    registry = read_cells(args.cells) if args.cells else None
    dataset, dropped = clean_report(records, window, registry)
    write_archive(run, dataset)
    rejects = sorted(errors + dropped, key=lambda e: e.line_number)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["line_number", "reason", "detail"])
    writer.writerows((e.line_number, e.reason.value, e.detail) for e in rejects)
    run.write_text("rejects.csv", buf.getvalue())
    print(f"kept {len(dataset)} records, rejected {len(rejects)}")
    return EXIT_OK


def cmd_summary(args, run: RunDir, manifest: RunManifest) -> int:
    summary = summarize(load_dataset(args))
    run.write_text("summary.csv", summary.to_csv())
    run.write_text("summary.json", _dumps(summary.to_dict()))
    report = summary.render()
    run.write_text("summary.txt", report + "\n")
    print(report)
    return EXIT_OK


def _categories(args):
    return sorted(set(args.category)) if args.category else None


def cmd_temporal(args, run: RunDir, manifest: RunManifest) -> int:
    dataset = load_dataset(args)
    cats = _categories(args)
    subset = filter_dataset(dataset, cats) if cats else dataset
    trend = weekly_histogram(subset, None)
    run.write_text("trend.csv", trend.to_csv())
    run.write_text("trend.json", _dumps({**trend.to_dict(), "category": cats}))

    field_ = build_field(dataset, args.bin, category_filter=cats)
    if args.max_lag is None:
        args.max_lag = field_.n_bins - 1
    if not 0 <= args.max_lag < field_.n_bins:
        raise UsageError(f"--max-lag must lie in [0, {field_.n_bins}) for this window; got {args.max_lag}")
    curve = global_temporal_relevance(field_, args.max_lag, args.normalize, args.threads)
    if curve.degenerate:
        _warn(manifest, "temporal relevance curve is degenerate (no cell varies over time)")
    run.write_text("temporal.csv", curve.to_csv())
    run.write_text("temporal.json", _dumps({**curve.to_dict(), "bin": args.bin, "category": cats}))
    print(f"temporal curve: {len(curve.points)} lags over {field_.n_cells} cells")
    return EXIT_OK


def cmd_spatial(args, run: RunDir, manifest: RunManifest) -> int:
    dataset = load_dataset(args)
    cats = _categories(args)
    density = spatial_density(dataset, cats, tuple(args.resolution))
    run.write_text("density.csv", density.to_csv())
    run.write_text("density.json", _dumps({**density.to_dict(), "category": cats}))

    try:
        field_ = build_field(dataset, args.bin, category_filter=cats)
        curve = global_spatial_relevance(field_, args.bin_width_m, args.max_dist_m, args.normalize, args.threads)
    except RelevanceError as exc:
        raise UsageError(str(exc)) from None
    active = int((field_.counts.sum(axis=1) > 0).sum())
    if active < 2:
        _warn(manifest, f"only {active} cell(s) with events; the spatial curve has no pairs")
    elif curve.degenerate:
        _warn(manifest, "spatial relevance curve is degenerate (no cell pairs within range)")
    run.write_text("spatial.csv", curve.to_csv())
    run.write_text("spatial.json", _dumps({**curve.to_dict(), "bin": args.bin, "category": cats}))
    print(f"spatial curve: {len(curve.points)} distance bins over {field_.n_cells} cells")
    return EXIT_OK


def cmd_categories(args, run: RunDir, manifest: RunManifest) -> int:
    dataset = load_dataset(args)
    try:
        matrix = relevance_matrix(dataset, args.row_source, args.col_source, args.mode)
    except CategoryError as exc:
        raise UsageError(str(exc)) from None
    run.write_text("categories.csv", matrix.to_csv())
    run.write_text("categories.json", _dumps(matrix.to_dict()))
    row, col = matrix.argmax()
    print(f"strongest pair: {row} / {col} (nmi {matrix.score(row, col)!r})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _source(value: str) -> SourceChannel:
    try:
        return SourceChannel.parse(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown source {value!r}") from None


def _positive(value: str) -> float:
    v = float(value)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _count(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="urbangrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data_input=True):
        p.add_argument("--out", required=True, type=Path, help="output directory for this run")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        p.add_argument("--threads", type=_count, default=1, help="worker threads for the heavy sweeps")
        if data_input:
            p.add_argument("--input", required=True, help="dataset archive directory or raw event file")
            p.add_argument("--format", choices=FORMATS, default="csv", help="raw file format")
            p.add_argument("--window", nargs=2, metavar=("START", "END"),
                           help="analysis window [START, END) for raw input; inferred when omitted")
            p.add_argument("--cells", help="cell registry CSV (cell_id, centroid_lat, centroid_lon)")

    p = sub.add_parser("synth", help="generate a synthetic dataset archive from a JSON config")
    p.add_argument("--config", required=True, help="generator config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--format", choices=FORMATS, default="csv",
                   help="also write dataset.jsonl when 'jsonl'")
    common(p, data_input=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse, validate and clean a raw event file")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("summary", help="counts and shares per source and category")
    common(p)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("temporal", help="weekly trend and global temporal relevance curve")
    common(p)
    p.add_argument("--bin", choices=("day", "week"), default="day")
    p.add_argument("--max-lag", type=int, help="largest lag in bins (default: all)")
    p.add_argument("--category", action="append", help="restrict to a category (repeatable)")
    p.add_argument("--normalize", action="store_true", help="divide by the lag-0 value")
    p.set_defaults(func=cmd_temporal)

    p = sub.add_parser("spatial", help="density grid and global spatial relevance curve")
    common(p)
    p.add_argument("--bin", choices=("day", "week"), default="day")
    p.add_argument("--bin-width-m", type=_positive, default=1000.0)
    p.add_argument("--max-dist-m", type=_positive, default=30000.0)
    p.add_argument("--resolution", nargs=2, type=_count, default=[50, 50], metavar=("NX", "NY"))
    p.add_argument("--category", action="append", help="restrict to a category (repeatable)")
    p.add_argument("--normalize", action="store_true", help="divide by the mean cell variance")
    p.set_defaults(func=cmd_spatial)

    p = sub.add_parser("categories", help="category relevance (NMI) matrix between two sources")
    common(p)
    p.add_argument("--mode", choices=("product", "min", "presence"), default="product")
    p.add_argument("--row-source", type=_source, default=SourceChannel.MOBILE_DEVICE)
    p.add_argument("--col-source", type=_source, default=SourceChannel.HOTLINE)
    p.set_defaults(func=cmd_categories)
    return parser


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    run = None
    try:
        started = _now()
        if getattr(args, "input", None) is not None and not Path(args.input).exists():
            raise UsageError(f"input {args.input} not found")
        if args.command == "synth" and not Path(args.config).is_file():
            raise UsageError(f"config {args.config} not found")
        source = Path(args.config if args.command == "synth" else args.input)
        digests = input_digests(source)
        manifest = RunManifest(["urbangrid", *argv], config_digest(args), digests, __version__, started)
        run = RunDir(args.out, args.force)
        code = args.func(args, run, manifest)
        if input_digests(source) != digests:
            raise DataError("input changed while the command ran")
        run.commit(manifest)
        run = None
        return code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IngestError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if run is not None:
            run.discard()


if __name__ == "__main__":
    sys.exit(main())
