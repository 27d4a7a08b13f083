"""Crime-record ingestion, windowing, severity classes and per-block counts."""

from __future__ import annotations

import calendar
import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from .exceptions import ConfigError, DataError, SchemaError

EARTH_RADIUS_M = 6371008.8
FRIDAY = 4
DEFAULT_MAJOR_TYPES = ("ROBBERY", "CRIM SEXUAL ASSAULT", "CRIMINAL SEXUAL ASSAULT",
                       "HOMICIDE", "ARSON")
CANONICAL_COLUMNS = ("iso_datetime", "x_m", "y_m", "block_id", "severity")


class Severity(str, Enum):
    MAJOR = "major"
    MISDEMEANOR = "misdemeanor"


@dataclass(frozen=True)
class RawEvent:
    timestamp: dt.datetime
    offense: str
    region: int
    latitude: float | None = None
    longitude: float | None = None
    block_code: str | None = None


@dataclass(frozen=True)
class CrimeEvent:
    timestamp: dt.datetime
    x_m: float
    y_m: float
    block_id: int
    severity: Severity
    region: int | None = None
    # (month, week_index, weekday, minute_of_day) of the original date, kept after folding
    slot: tuple | None = None


@dataclass
class SchemaConfig:
    """Maps CSV column names onto the roles the parser needs."""

    date: str = "Date"
    offense: str = "Primary Type"
    region: str = "District"
    latitude: str | None = "Latitude"
    longitude: str | None = "Longitude"
    block: str | None = "Beat"
    date_formats: tuple = ("%m/%d/%Y %I:%M:%S %p", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S",
                           "%Y-%m-%dT%H:%M")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SchemaConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown schema roles: {sorted(unknown)}")
        kwargs = dict(mapping)
        if "date_formats" in kwargs:
            kwargs["date_formats"] = tuple(kwargs["date_formats"])
        return cls(**kwargs)


@dataclass
class ParseReport:
    events: list[RawEvent]
    skipped: int = 0
    problems: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class Block:
    code: str
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def centroid(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x < self.xmax and self.ymin <= y < self.ymax


@dataclass
class BlockGeometry:
    """Rectangular blocks in local meters about a projection origin."""

    origin_lat: float
    origin_lon: float
    blocks: list[Block]
    region: int = 6

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def index_of_code(self, code) -> int | None:
        code = normalize_code(code)
        for i, b in enumerate(self.blocks):
            if b.code == code:
                return i
        return None

    def locate(self, x: float, y: float) -> int | None:
        for i, b in enumerate(self.blocks):
            if b.contains(x, y):
                return i
        return None

    def bounds(self) -> tuple[float, float, float, float]:
        return (min(b.xmin for b in self.blocks), min(b.ymin for b in self.blocks),
                max(b.xmax for b in self.blocks), max(b.ymax for b in self.blocks))

    def to_dict(self) -> dict:
        return {"origin_lat": self.origin_lat, "origin_lon": self.origin_lon, "region": self.region,
                "blocks": [{"code": b.code, "rect": [b.xmin, b.ymin, b.xmax, b.ymax]}
                           for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockGeometry":
        try:
            blocks = [Block(normalize_code(b["code"]), *map(float, b["rect"])) for b in d["blocks"]]
            geom = cls(float(d["origin_lat"]), float(d["origin_lon"]), blocks, int(d.get("region", 6)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed block geometry: {exc}") from exc
        if not blocks:
            raise ConfigError("block geometry defines no blocks")
        return geom

    @classmethod
    def load(cls, path) -> "BlockGeometry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


def normalize_code(code) -> str:
    s = str(code).strip()
    return s.lstrip("0") or "0"


def synthetic_tiling(rows: int = 3, cols: int = 4, block_m: float = 800.0,
                     origin_lat: float = 41.75, origin_lon: float = -87.62,
                     region: int = 6) -> BlockGeometry:
    """A ``rows x cols`` grid of square blocks centred on the origin.

    Block codes follow the beat convention ``<region><row+1><col+1>``.
    """
    width, height = cols * block_m, rows * block_m
    blocks = []
    for r in range(rows):
        for c in range(cols):
            x0 = -width / 2 + c * block_m
            y0 = -height / 2 + r * block_m
            blocks.append(Block(f"{region}{r + 1}{c + 1}", x0, y0, x0 + block_m, y0 + block_m))
    return BlockGeometry(origin_lat, origin_lon, blocks, region)


def project(lat: float, lon: float, origin_lat: float, origin_lon: float) -> tuple[float, float]:
    """Equirectangular projection to local meters about the origin."""
    k = math.pi / 180.0 * EARTH_RADIUS_M
    return ((lon - origin_lon) * k * math.cos(math.radians(origin_lat)), (lat - origin_lat) * k)


def unproject(x: float, y: float, origin_lat: float, origin_lon: float) -> tuple[float, float]:
    k = math.pi / 180.0 * EARTH_RADIUS_M
    return (origin_lat + y / k, origin_lon + x / (k * math.cos(math.radians(origin_lat))))


# ---- parsing ---------------------------------------------------------------

def _parse_date(text: str, formats: Sequence[str]) -> dt.datetime:
    text = text.strip()
    for fmt in formats:
        try:
            return dt.datetime.strptime(text, fmt).replace(second=0, microsecond=0)
        except ValueError:
            continue
    raise ValueError(f"unparseable date {text!r}")


def _opt_float(text) -> float | None:
    if text is None or str(text).strip() == "":
        return None
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("non-finite coordinate")
    return v


def parse_csv(path, schema: SchemaConfig | None = None) -> ParseReport:
    """Read a crime CSV into raw events; malformed rows are counted, not fatal."""
    schema = schema or SchemaConfig()
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        mandatory = [schema.date, schema.offense, schema.region]
        missing = [c for c in mandatory if c not in header]
        has_coords = (schema.latitude in header and schema.longitude in header)
        has_block = schema.block is not None and schema.block in header
        if not (has_coords or has_block):
            missing.append(f"{schema.latitude}/{schema.longitude} or {schema.block}")
        if missing:
            raise SchemaError(f"{path}: missing mandatory column(s) {missing}")
        report = ParseReport(events=[])
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = _parse_date(row[schema.date] or "", schema.date_formats)
                region = int(float(row[schema.region]))
                lat = _opt_float(row.get(schema.latitude)) if has_coords else None
                lon = _opt_float(row.get(schema.longitude)) if has_coords else None
                code = (row.get(schema.block) or "").strip() if has_block else ""
                if (lat is None or lon is None) and not code:
                    raise ValueError("no coordinates and no block")
            except (ValueError, TypeError, KeyError) as exc:
                report.skipped += 1
                report.problems.append((lineno, str(exc)))
                continue
            report.events.append(RawEvent(ts, (row[schema.offense] or "").strip(), region,
                                          lat, lon, code or None))
    return report


# ---- filtering and classification -------------------------------------------

def in_window(ts: dt.datetime, weekday: int = FRIDAY, start: dt.time = dt.time(19, 0),
              end: dt.time | None = None) -> bool:
    """``end=None`` means midnight at the end of the day."""
    if ts.weekday() != weekday:
        return False
    minute = ts.hour * 60 + ts.minute
    lo = start.hour * 60 + start.minute
    hi = 24 * 60 if end is None else end.hour * 60 + end.minute
    return lo <= minute < hi


def filter_window(events: Iterable, weekday: int = FRIDAY, start: dt.time = dt.time(19, 0),
                  end: dt.time | None = None, region: int | None = 6) -> list:
    return [e for e in events
            if in_window(e.timestamp, weekday, start, end)
            and (region is None or e.region == region)]


def classify_severity(offense_type: str, major_types: Iterable[str] = DEFAULT_MAJOR_TYPES) -> Severity:
    key = (offense_type or "").strip().upper()
    majors = {m.strip().upper() for m in major_types}
    return Severity.MAJOR if key and key in majors else Severity.MISDEMEANOR


def to_events(raw: Iterable[RawEvent], geometry: BlockGeometry,
              major_types: Iterable[str] = DEFAULT_MAJOR_TYPES) -> tuple[list[CrimeEvent], int]:
    """Project and block-assign raw events; returns ``(events, dropped)``.

    An event's block comes from its block code when the code belongs to the
    geometry, otherwise from its projected position. Events without
    coordinates sit at their block centroid. Events that resolve to no block
    are dropped.
    """
    major_types = tuple(major_types)
    out, dropped = [], 0
    for r in raw:
        xy = None
        if r.latitude is not None and r.longitude is not None:
            xy = project(r.latitude, r.longitude, geometry.origin_lat, geometry.origin_lon)
        idx = geometry.index_of_code(r.block_code) if r.block_code else None
        if idx is None and xy is not None:
            idx = geometry.locate(*xy)
        if idx is None:
            dropped += 1
            continue
        if xy is None:
            xy = geometry.blocks[idx].centroid
        out.append(CrimeEvent(r.timestamp, xy[0], xy[1], idx,
                              classify_severity(r.offense, major_types), r.region))
    out.sort(key=lambda e: (e.timestamp, e.block_id, e.x_m, e.y_m))
    return out, dropped


def split_years(events: Iterable[CrimeEvent], train_years=(2005, 2013),
                test_years=(2014, 2016)) -> tuple[list[CrimeEvent], list[CrimeEvent]]:
    train = [e for e in events if train_years[0] <= e.timestamp.year <= train_years[1]]
    test = [e for e in events if test_years[0] <= e.timestamp.year <= test_years[1]]
    return train, test


# ---- folding ------------------------------------------------------------------

def slot_of(ts: dt.datetime) -> tuple[int, int, int, int]:
    """(month, week-of-month, weekday, minute-of-day); week k = k-th such weekday."""
    return (ts.month, (ts.day - 1) // 7, ts.weekday(), ts.hour * 60 + ts.minute)


def canonical_date(year: int, month: int, week_index: int, weekday: int) -> dt.date:
    """The ``week_index``-th ``weekday`` of ``month`` in ``year``.

    A fifth occurrence that does not exist in ``year`` falls back to the
    month's last occurrence of that weekday.
    """
    first = dt.date(year, month, 1).weekday()
    day = 1 + (weekday - first) % 7 + 7 * week_index
    last_day = calendar.monthrange(year, month)[1]
    while day > last_day:
        day -= 7
    return dt.date(year, month, day)


def fold_years(test_events: Iterable[CrimeEvent], years: Sequence[int] = (2014, 2015, 2016),
               reference_year: int | None = None) -> list[CrimeEvent]:
    """Merge several years into one by (month, week, weekday, time) alignment."""
    events = list(test_events)
    if not events:
        return []
    years = set(years)
    ref = reference_year if reference_year is not None else max(years)
    out = []
    for e in events:
        if e.timestamp.year not in years:
            raise DataError(f"event year {e.timestamp.year} not in fold set {sorted(years)}")
        slot = e.slot or slot_of(e.timestamp)
        day = canonical_date(ref, slot[0], slot[1], slot[2])
        ts = dt.datetime.combine(day, dt.time(slot[3] // 60, slot[3] % 60))
        out.append(replace(e, timestamp=ts, slot=slot))
    out.sort(key=lambda e: (e.timestamp, e.block_id, e.x_m, e.y_m))
    return out


# ---- cycles and counts ----------------------------------------------------------

def cycle_dates(first: dt.date, last: dt.date, weekday: int = FRIDAY) -> list[dt.date]:
    """Every ``weekday`` from ``first`` to ``last`` inclusive, one per control cycle."""
    d = first + dt.timedelta(days=(weekday - first.weekday()) % 7)
    out = []
    while d <= last:
        out.append(d)
        d += dt.timedelta(days=7)
    return out


def year_cycles(start_year: int, end_year: int, weekday: int = FRIDAY) -> list[dt.date]:
    return cycle_dates(dt.date(start_year, 1, 1), dt.date(end_year, 12, 31), weekday)


def group_by_cycle(events: Iterable[CrimeEvent], cycles: Sequence[dt.date]) -> list[list[CrimeEvent]]:
    index = {d: i for i, d in enumerate(cycles)}
    groups: list[list[CrimeEvent]] = [[] for _ in cycles]
    for e in events:
        i = index.get(e.timestamp.date())
        if i is None:
            raise DataError(f"event at {e.timestamp} falls in no control cycle")
        groups[i].append(e)
    return groups


def block_counts(events: Iterable[CrimeEvent], block_count: int,
                 buckets: Sequence | None = None,
                 key: Callable = lambda e: e.timestamp.date()) -> np.ndarray:
    """Count events per (time bucket, block); empty cells are explicit zeros."""
    events = list(events)
    if buckets is None:
        buckets = sorted({key(e) for e in events})
    index = {b: i for i, b in enumerate(buckets)}
    counts = np.zeros((len(buckets), block_count))
    for e in events:
        if not 0 <= e.block_id < block_count:
            raise DataError(f"block id {e.block_id} outside [0, {block_count})")
        i = index.get(key(e))
        if i is None:
            raise DataError(f"event bucket {key(e)!r} not among the requested buckets")
        counts[i, e.block_id] += 1
    return counts


# ---- canonical event file ---------------------------------------------------------

def format_events_csv(events: Iterable[CrimeEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CANONICAL_COLUMNS)
    for e in events:
        w.writerow([e.timestamp.strftime("%Y-%m-%dT%H:%M"), f"{e.x_m:.3f}", f"{e.y_m:.3f}",
                    e.block_id, e.severity.value])
    return buf.getvalue()


def read_events_csv(path) -> list[CrimeEvent]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"event file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CANONICAL_COLUMNS:
            raise SchemaError(f"{path}: expected columns {CANONICAL_COLUMNS}")
        try:
            return [CrimeEvent(dt.datetime.strptime(r["iso_datetime"], "%Y-%m-%dT%H:%M"),
                               float(r["x_m"]), float(r["y_m"]), int(r["block_id"]),
                               Severity(r["severity"]))
                    for r in reader]
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
