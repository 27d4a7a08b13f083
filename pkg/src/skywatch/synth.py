"""Deterministic synthetic crime records in the Chicago open-data CSV layout.

Events cluster around fixed hotspots inside the block tiling. Hotspot
intensities follow a weekly periodic pattern, so past per-block counts carry
information about the next week. Off-window, off-day and out-of-region rows
are mixed in so the window filter has something to remove, and a small
fraction of rows is deliberately malformed.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass

import numpy as np

from .crime import BlockGeometry, synthetic_tiling, unproject, year_cycles

MAJOR_OFFENSES = ("ROBBERY", "CRIM SEXUAL ASSAULT", "HOMICIDE", "ARSON")
MAJOR_WEIGHTS = (0.6, 0.15, 0.1, 0.15)
MINOR_OFFENSES = ("THEFT", "BATTERY", "CRIMINAL DAMAGE", "NARCOTICS", "ASSAULT",
                  "DECEPTIVE PRACTICE", "CRIMINAL TRESPASS")
CSV_COLUMNS = ("ID", "Date", "Primary Type", "Beat", "District", "Latitude", "Longitude")


@dataclass
class SyntheticCrimeConfig:
    start_year: int = 2005
    end_year: int = 2016
    rows: int = 3
    cols: int = 4
    block_m: float = 800.0
    region: int = 6
    hotspots: int = 6
    hotspot_sigma_m: float = 90.0
    misdemeanors_per_cycle: float = 24.0
    majors_per_cycle: float = 6.0
    background_fraction: float = 0.1
    period: int = 4
    noise_fraction: float = 0.3
    malformed_fraction: float = 0.002
    missing_coord_fraction: float = 0.01


def generate_rows(cfg: SyntheticCrimeConfig, seed: int = 0,
                  geometry: BlockGeometry | None = None) -> list[dict]:
    rng = np.random.default_rng(seed)
    geom = geometry or synthetic_tiling(cfg.rows, cfg.cols, cfg.block_m, region=cfg.region)
    xmin, ymin, xmax, ymax = geom.bounds()
    margin = 2 * cfg.hotspot_sigma_m
    centers = np.column_stack([rng.uniform(xmin + margin, xmax - margin, cfg.hotspots),
                               rng.uniform(ymin + margin, ymax - margin, cfg.hotspots)])
    base = rng.dirichlet(np.full(cfg.hotspots, 2.0))
    phase = rng.integers(0, cfg.period, cfg.hotspots)

    rows: list[dict] = []

    def emit(ts, offense, x, y, region):
        lat, lon = unproject(x, y, geom.origin_lat, geom.origin_lon)
        idx = geom.locate(x, y)
        beat = f"{geom.blocks[idx].code:0>4}" if idx is not None else f"{region}99"
        rows.append({"Date": ts.strftime("%m/%d/%Y %I:%M:%S %p"), "Primary Type": offense,
                     "Beat": beat, "District": str(region),
                     "Latitude": f"{lat:.9f}", "Longitude": f"{lon:.9f}"})

    def sample_xy(n, weights):
        k = rng.choice(cfg.hotspots, size=n, p=weights)
        xy = centers[k] + rng.normal(0.0, cfg.hotspot_sigma_m, size=(n, 2))
        bg = rng.random(n) < cfg.background_fraction
        xy[bg] = np.column_stack([rng.uniform(xmin, xmax, bg.sum()), rng.uniform(ymin, ymax, bg.sum())])
        xy[:, 0] = np.clip(xy[:, 0], xmin, xmax - 1e-3)
        xy[:, 1] = np.clip(xy[:, 1], ymin, ymax - 1e-3)
        return xy

    def sample_time(day, n):
        minutes = rng.integers(19 * 60, 24 * 60, size=n)
        return [dt.datetime.combine(day, dt.time(int(m) // 60, int(m) % 60)) for m in minutes]

    for week, day in enumerate(year_cycles(cfg.start_year, cfg.end_year)):
        # active hotspots triple their weight in their phase of the cycle
        boost = np.where((week + phase) % cfg.period == 0, 3.0, 1.0)
        w = base * boost
        w /= w.sum()
        scale = float(boost @ base)
        for n, offenses, probs in (
                (rng.poisson(cfg.misdemeanors_per_cycle * scale), MINOR_OFFENSES, None),
                (rng.poisson(cfg.majors_per_cycle * scale), MAJOR_OFFENSES, MAJOR_WEIGHTS)):
            xy = sample_xy(n, w)
            for ts, (x, y) in zip(sample_time(day, n), xy):
                emit(ts, str(rng.choice(offenses, p=probs)), x, y, cfg.region)
        # distractors: wrong hours, wrong weekday, other districts
        n_noise = rng.poisson(cfg.noise_fraction * cfg.misdemeanors_per_cycle)
        for _ in range(n_noise):
            kind = rng.integers(3)
            x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
            offense = str(rng.choice(MINOR_OFFENSES + MAJOR_OFFENSES))
            if kind == 0:
                ts = dt.datetime.combine(day, dt.time(int(rng.integers(0, 19)), int(rng.integers(60))))
                emit(ts, offense, x, y, cfg.region)
            elif kind == 1:
                other = day - dt.timedelta(days=int(rng.integers(1, 7)))
                ts = dt.datetime.combine(other, dt.time(int(rng.integers(19, 24)), int(rng.integers(60))))
                emit(ts, offense, x, y, cfg.region)
            else:
                ts = dt.datetime.combine(day, dt.time(int(rng.integers(19, 24)), int(rng.integers(60))))
                emit(ts, offense, x + 8000.0, y, int(rng.choice([1, 5, 7, 12])))

    for i, row in enumerate(rows):
        u = rng.random()
        if u < cfg.malformed_fraction:
            row["Date"] = "not-a-date"
        elif u < cfg.malformed_fraction + cfg.missing_coord_fraction:
            row["Latitude"] = row["Longitude"] = ""
        row["ID"] = str(10_000_000 + i)
    return rows


def write_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
