"""Seeded generator of grid-management style event datasets.

Events get a source channel, a category, a reporting time drawn from a
seasonal (optionally level-shifted) daily rate, and a location drawn from a
mixture of 2-D Gaussian hotspots snapped to a square cell lattice.  Hotspots
sharing an ``activity_group`` share one random day-to-day intensity profile,
so their cells move together in time.  A coupling ``(a, b, strength)`` moves
that fraction of category-``b`` events into the cells of random
category-``a`` events.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from typing import Optional

import numpy as np
import pandas as pd

from .core import (
    EARTH_RADIUS_M,
    SOURCES,
    EventDataset,
    Records,
    SourceChannel,
    check_category,
    format_timestamp,
    parse_timestamp,
    to_epoch,
)
from .ingestion import derive_cells

GENERATOR_ID = "numpy.random.PCG64+SeedSequence/urbangrid-synth-v1"
SECONDS_PER_DAY = 86_400
DEFAULT_CENTER = (31.23, 121.47)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    name: str
    weight: float = 1.0
    source: Optional[SourceChannel] = None
    seasonal_amplitude: float = 0.0
    seasonal_period: float = 365.0
    seasonal_phase: float = 0.0
    level_shift: Optional[tuple] = None  # (week, factor)

    def __post_init__(self):
        for name in ("weight", "seasonal_amplitude", "seasonal_period", "seasonal_phase"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.source is not None:
            object.__setattr__(self, "source", SourceChannel(self.source))
        if self.level_shift is not None:
            week, factor = self.level_shift
            object.__setattr__(self, "level_shift", (float(week), float(factor)))


@dataclass(frozen=True)
class Hotspot:
    lat: float
    lon: float
    sigma_m: float
    weight: float = 1.0
    activity_group: Optional[str] = None

    def __post_init__(self):
        for name in ("lat", "lon", "sigma_m", "weight"):
            object.__setattr__(self, name, float(getattr(self, name)))


@dataclass(frozen=True)
class Coupling:
    category_a: str
    category_b: str
    strength: float

    def __post_init__(self):
        object.__setattr__(self, "strength", float(self.strength))


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    n_events: int
    window: tuple
    categories: tuple
    hotspots: tuple = (Hotspot(*DEFAULT_CENTER, 5000.0),)
    source_mix: float = 0.79
    couplings: tuple = ()
    cell_size: float = 100.0
    center: Optional[tuple] = None
    activity_sd: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "hotspots", tuple(self.hotspots))
        object.__setattr__(self, "couplings", tuple(self.couplings))
        for name in ("source_mix", "cell_size", "activity_sd"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not isinstance(self.n_events, int) or self.n_events < 1:
            raise ConfigError("n_events must be a positive integer")
        start, end = self.window
        if not start < end:
            raise ConfigError("window must be non-empty")
        if not self.categories:
            raise ConfigError("at least one category is required")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ConfigError("category names must be unique")
        for c in self.categories:
            try:
                check_category(c.name)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if not c.weight > 0:
                raise ConfigError(f"category {c.name!r}: weight must be positive")
            if not 0 <= c.seasonal_amplitude <= 1:
                raise ConfigError(f"category {c.name!r}: seasonal_amplitude must lie in [0, 1]")
            if not c.seasonal_period > 0:
                raise ConfigError(f"category {c.name!r}: seasonal_period must be positive")
            if c.level_shift is not None and not (c.level_shift[0] >= 0 and c.level_shift[1] >= 0):
                raise ConfigError(f"category {c.name!r}: level_shift needs week >= 0 and factor >= 0")
        if not self.hotspots:
            raise ConfigError("at least one hotspot is required")
        for h in self.hotspots:
            if not h.sigma_m > 0:
                raise ConfigError("hotspot sigma must be positive")
            if not h.weight > 0:
                raise ConfigError("hotspot weight must be positive")
            if not (-90 < h.lat < 90 and -180 <= h.lon <= 180):
                raise ConfigError("hotspot centre outside valid coordinates")
        if not 0 <= self.source_mix <= 1:
            raise ConfigError("source_mix must lie in [0, 1]")
        for s, p in zip(SOURCES, (self.source_mix, 1 - self.source_mix)):
            if p > 0 and not self._eligible(s):
                raise ConfigError(f"no category can be reported through {s.value}")
        for cp in self.couplings:
            if cp.category_a not in names or cp.category_b not in names:
                raise ConfigError(f"coupling refers to unknown category: {cp}")
            if not 0 <= cp.strength <= 1:
                raise ConfigError("coupling strength must lie in [0, 1]")
        if not self.cell_size > 0:
            raise ConfigError("cell_size must be positive")
        if self.activity_sd < 0:
            raise ConfigError("activity_sd must be non-negative")

    def _eligible(self, source: SourceChannel) -> list:
        return [i for i, c in enumerate(self.categories) if c.source is None or c.source is source]

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        try:
            cats = []
            for c in d["categories"]:
                shift = c.get("level_shift")
                if isinstance(shift, dict):
                    shift = (shift["week"], shift["factor"])
                cats.append(CategorySpec(
                    name=c["name"],
                    weight=float(c.get("weight", 1.0)),
                    source=SourceChannel(c["source"]) if c.get("source") else None,
                    seasonal_amplitude=float(c.get("seasonal_amplitude", 0.0)),
                    seasonal_period=float(c.get("seasonal_period", 365.0)),
                    seasonal_phase=float(c.get("seasonal_phase", 0.0)),
                    level_shift=tuple(shift) if shift is not None else None,
                ))
            hotspots = tuple(
                Hotspot(float(h["lat"]), float(h["lon"]), float(h["sigma_m"]), float(h.get("weight", 1.0)),
                        h.get("activity_group"))
                for h in d.get("hotspots", [])
            ) or (Hotspot(*DEFAULT_CENTER, 5000.0),)
            couplings = tuple(
                Coupling(c["category_a"], c["category_b"], float(c["strength"])) for c in d.get("couplings", [])
            )
            start, end = (parse_timestamp(t) for t in d["window"])
            return cls(
                seed=d["seed"],
                n_events=d["n_events"],
                window=(start, end),
                categories=tuple(cats),
                hotspots=hotspots,
                source_mix=float(d.get("source_mix", 0.79)),
                couplings=couplings,
                cell_size=float(d.get("cell_size_m", 100.0)),
                center=tuple(d["center"]) if d.get("center") else None,
                activity_sd=float(d.get("activity_sd", 0.5)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed generator config: {exc!r}") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed generator config: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = [format_timestamp(t) for t in self.window]
        d["cell_size_m"] = d.pop("cell_size")
        for c, spec in zip(d["categories"], self.categories):
            c["source"] = spec.source.value if spec.source else None
            if spec.level_shift is not None:
                c["level_shift"] = {"week": spec.level_shift[0], "factor": spec.level_shift[1]}
        d["center"] = list(self.center) if self.center else None
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> GeneratorConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    return GeneratorConfig.from_dict(raw)


@dataclass
class _Streams:
    source: np.random.Generator
    category: np.random.Generator
    hotspot: np.random.Generator
    offset: np.random.Generator
    day: np.random.Generator
    second: np.random.Generator
    activity: np.random.Generator
    coupling: np.random.Generator
    extra: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        children = np.random.SeedSequence(seed).spawn(9)
        gens = [np.random.Generator(np.random.PCG64(s)) for s in children]
        return cls(*gens)


def _day_grid(window):
    start, end = (to_epoch(t) for t in window)
    span = end - start
    n_days = -(-span // SECONDS_PER_DAY)
    lengths = np.full(n_days, SECONDS_PER_DAY, dtype=np.int64)
    lengths[-1] = span - (n_days - 1) * SECONDS_PER_DAY
    return start, lengths


def category_rate(spec: CategorySpec, n_days: int) -> np.ndarray:
    """Relative daily event rate of one category (before partial-day scaling)."""
    day = np.arange(n_days, dtype=np.float64)
    rate = 1.0 + spec.seasonal_amplitude * np.sin(2 * np.pi * (day - spec.seasonal_phase) / spec.seasonal_period)
    if spec.level_shift is not None:
        week, factor = spec.level_shift
        rate = np.where(day >= 7 * week, rate * factor, rate)
    return np.clip(rate, 0.0, None)


def _activity_profiles(config: GeneratorConfig, n_days: int, rng: np.random.Generator) -> dict:
    groups = sorted({h.activity_group for h in config.hotspots if h.activity_group is not None})
    sd = config.activity_sd
    profiles = {None: np.ones(n_days)}
    for g in groups:
        profiles[g] = np.exp(sd * rng.standard_normal(n_days) - sd * sd / 2)
    return profiles


def generate_frame(config: GeneratorConfig) -> pd.DataFrame:
    """Generated events as a record frame, ordered by event index."""
    n = config.n_events
    rng = _Streams.from_seed(config.seed)
    start, day_lengths = _day_grid(config.window)
    n_days = len(day_lengths)

    source = np.where(rng.source.random(n) < config.source_mix, 0, 1).astype(np.int8)

    category = np.empty(n, dtype=np.int64)
    for s in SOURCES:
        idx = np.flatnonzero(source == s.code)
        if not len(idx):
            continue
        eligible = config._eligible(s)
        w = np.array([config.categories[i].weight for i in eligible])
        category[idx] = np.asarray(eligible)[rng.category.choice(len(eligible), size=len(idx), p=w / w.sum())]

    hw = np.array([h.weight for h in config.hotspots])
    hotspot = rng.hotspot.choice(len(config.hotspots), size=n, p=hw / hw.sum())

    # reporting day: category seasonality x hotspot activity x partial-day length
    profiles = _activity_profiles(config, n_days, rng.activity)
    group_of = [h.activity_group for h in config.hotspots]
    group_names = sorted(profiles, key=lambda g: (g is not None, g or ""))
    group_code = np.array([group_names.index(group_of[h]) for h in range(len(config.hotspots))])[hotspot]
    day_share = day_lengths / SECONDS_PER_DAY
    day = np.zeros(n, dtype=np.int64)
    for c, spec in enumerate(config.categories):
        rate = category_rate(spec, n_days) * day_share
        for g, name in enumerate(group_names):
            idx = np.flatnonzero((category == c) & (group_code == g))
            if not len(idx):
                continue
            p = rate * profiles[name]
            if not p.sum() > 0:
                raise ConfigError(f"category {spec.name!r} has zero rate over the window")
            day[idx] = rng.day.choice(n_days, size=len(idx), p=p / p.sum())
    second = np.floor(rng.second.random(n) * day_lengths[day]).astype(np.int64)
    reported = start + day * SECONDS_PER_DAY + second

    # location on the local tangent plane around the lattice origin
    lat0, lon0 = config.center or (config.hotspots[0].lat, config.hotspots[0].lon)
    coslat = math.cos(math.radians(lat0))
    hx = np.array([math.radians(h.lon - lon0) * EARTH_RADIUS_M * coslat for h in config.hotspots])
    hy = np.array([math.radians(h.lat - lat0) * EARTH_RADIUS_M for h in config.hotspots])
    sig = np.array([h.sigma_m for h in config.hotspots])
    offsets = rng.offset.standard_normal((n, 2))
    x = hx[hotspot] + sig[hotspot] * offsets[:, 0]
    y = hy[hotspot] + sig[hotspot] * offsets[:, 1]
    ix = np.floor(x / config.cell_size).astype(np.int64)
    iy = np.floor(y / config.cell_size).astype(np.int64)

    names = [c.name for c in config.categories]
    for cp in config.couplings:
        leaders = np.flatnonzero(category == names.index(cp.category_a))
        followers = np.flatnonzero(category == names.index(cp.category_b))
        if not len(leaders) or not len(followers):
            continue
        moved = followers[rng.coupling.random(len(followers)) < cp.strength]
        src = leaders[rng.coupling.integers(0, len(leaders), size=len(moved))]
        ix[moved] = ix[src]
        iy[moved] = iy[src]

    lattice, cell_code = np.unique(np.stack([ix, iy], axis=1), axis=0, return_inverse=True)
    cell_code = cell_code.reshape(-1)
    cell_ids = np.array([f"x{a}_y{b}" for a, b in lattice], dtype=object)
    cx = (lattice[:, 0] + 0.5) * config.cell_size
    cy = (lattice[:, 1] + 0.5) * config.cell_size
    cell_lat = lat0 + np.degrees(cy / EARTH_RADIUS_M)
    cell_lon = lon0 + np.degrees(cx / (EARTH_RADIUS_M * coslat))
    cell_lat = np.clip(cell_lat, -90.0, 90.0)
    cell_lon = (cell_lon + 180.0) % 360.0 - 180.0

    resolved = reported + np.floor(rng.extra.exponential(2 * SECONDS_PER_DAY, n)).astype(np.int64)
    priority = rng.extra.integers(1, 4, size=n)

    return pd.DataFrame({
        "event_id": np.array([f"E{i:08d}" for i in range(n)], dtype=object),
        "cell_id": cell_ids[cell_code],
        "source": source,
        "category": np.array(names, dtype=object)[category],
        "reported_at": reported,
        "resolved_at": pd.array(resolved, dtype="Int64"),
        "latitude": cell_lat[cell_code],
        "longitude": cell_lon[cell_code],
        "priority": pd.array(priority, dtype="Int64"),
        "description": np.full(n, None, dtype=object),
        "line": np.zeros(n, dtype=np.int64),
    })


def generate(config: GeneratorConfig) -> EventDataset:
    frame = generate_frame(config)
    return EventDataset(Records(frame), derive_cells(frame), config.window, 0)


def generator_metadata(config: GeneratorConfig) -> dict:
    return {
        "generator": GENERATOR_ID,
        "numpy": np.__version__,
        "seed": config.seed,
        "config_sha256": config.digest(),
    }


def default_window() -> tuple:
    start = parse_timestamp("2015-01-01T00:00:00+00:00")
    return start, start + timedelta(days=609)


def config_for(seed: int, n_events: int, categories, **kwargs) -> GeneratorConfig:
    """Shorthand used by fixtures: categories may be names or CategorySpec."""
    cats = tuple(c if isinstance(c, CategorySpec) else CategorySpec(c) for c in categories)
    window = kwargs.pop("window", default_window())
    return GeneratorConfig(seed=seed, n_events=n_events, window=window, categories=cats, **kwargs)


def window_of(start: str, days: int) -> tuple:
    t0: datetime = parse_timestamp(start)
    return t0, t0 + timedelta(days=days)
