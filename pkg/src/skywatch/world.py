"""Geometry of one control cycle: placement grid, relay connectivity, sensing
capture and deterrence counting.

Distances are planar Euclidean and every range test is inclusive (``<=``).
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import yaml

from .crime import CrimeEvent, Severity
from .exceptions import ConfigError, DataError


class Role(IntEnum):
    SENSING = 0
    COMPUTING = 1
    DETERRENCE = 2


@dataclass(frozen=True)
class WorldConfig:
    station_xy: tuple = (0.0, 0.0)
    placement_radius_m: float = 2500.0
    grid_spacing_m: float = 50.0
    comm_range_m: float = 500.0
    sensing_range_m: float = 100.0
    deterrence_range_m: float = 80.0
    uav_total: int = 20
    block_count: int = 12

    def __post_init__(self):
        object.__setattr__(self, "station_xy", tuple(float(v) for v in self.station_xy))
        for name in ("placement_radius_m", "grid_spacing_m", "comm_range_m",
                     "sensing_range_m", "deterrence_range_m"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.uav_total < 1 or self.block_count < 1:
            raise ConfigError("uav_total and block_count must be at least 1")

    def with_range(self, deterrence_range_m: float) -> "WorldConfig":
        d = asdict(self)
        d["deterrence_range_m"] = float(deterrence_range_m)
        return WorldConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "WorldConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass(frozen=True)
class UavAssignment:
    uav_id: int
    cell_index: int
    role: Role


@dataclass
class ConnectivityResult:
    reachable: dict[int, bool]
    edges: list[tuple[int, int]] = field(default_factory=list)


@lru_cache(maxsize=32)
def build_grid(config: WorldConfig) -> np.ndarray:
    """Lattice points within the placement radius, row-major (y, then x)."""
    s, r = config.grid_spacing_m, config.placement_radius_m
    n = int(np.floor(r / s + 1e-9))
    steps = np.arange(-n, n + 1) * s
    gy, gx = np.meshgrid(steps, steps, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    keep = np.hypot(pts[:, 0], pts[:, 1]) <= r * (1 + 1e-12)
    cells = pts[keep] + np.asarray(config.station_xy)
    if len(cells) == 0:
        raise ConfigError("placement grid is empty")
    cells.setflags(write=False)
    return cells


def positions_of(assignments: Sequence[UavAssignment], config: WorldConfig) -> np.ndarray:
    grid = build_grid(config)
    idx = np.array([a.cell_index for a in assignments], dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(grid)):
        raise DataError("assignment references a cell outside the grid")
    return grid[idx] if idx.size else np.zeros((0, 2))


def reachable_mask(pos: np.ndarray, roles: np.ndarray, comm_range: float) -> np.ndarray:
    """Breadth-first search from every computing UAV over sensing/computing relays.

    Returns a boolean mask over all UAVs; only sensing and computing UAVs can
    be True.
    """
    roles = np.asarray(roles)
    relay = (roles == Role.SENSING) | (roles == Role.COMPUTING)
    n = len(roles)
    reach = np.zeros(n, dtype=bool)
    if n == 0:
        return reach
    d = np.hypot(pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1])
    adj = (d <= comm_range) & relay[:, None] & relay[None, :]
    queue = deque(np.flatnonzero(roles == Role.COMPUTING).tolist())
    reach[list(queue)] = True
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u] & ~reach):
            reach[v] = True
            queue.append(int(v))
    return reach


def connectivity(assignments: Sequence[UavAssignment], config: WorldConfig) -> ConnectivityResult:
    pos = positions_of(assignments, config)
    roles = np.array([a.role for a in assignments], dtype=np.int64)
    reach = reachable_mask(pos, roles, config.comm_range_m)
    relay = [i for i, a in enumerate(assignments) if a.role != Role.DETERRENCE]
    edges = []
    for x, i in enumerate(relay):
        for j in relay[x + 1:]:
            if np.hypot(*(pos[i] - pos[j])) <= config.comm_range_m:
                edges.append((assignments[i].uav_id, assignments[j].uav_id))
    return ConnectivityResult(
        reachable={a.uav_id: bool(reach[i]) for i, a in enumerate(assignments)
                   if a.role == Role.SENSING},
        edges=edges)


def covered(points: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    """Mask of points lying within ``radius`` of at least one center."""
    if len(points) == 0 or len(centers) == 0:
        return np.zeros(len(points), dtype=bool)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return (d2 <= radius * radius).any(axis=1)


def _xy(events: Sequence[CrimeEvent]) -> np.ndarray:
    return np.array([(e.x_m, e.y_m) for e in events], dtype=float).reshape(-1, 2)


def sensed_events(events_in_cycle: Sequence[CrimeEvent], assignments: Sequence[UavAssignment],
                  conn: ConnectivityResult, config: WorldConfig) -> list[CrimeEvent]:
    """Misdemeanors inside the sensing range of a sensing UAV that reaches a computing UAV."""
    pos = positions_of(assignments, config)
    live = [i for i, a in enumerate(assignments)
            if a.role == Role.SENSING and conn.reachable.get(a.uav_id, False)]
    minors = [e for e in events_in_cycle if e.severity == Severity.MISDEMEANOR]
    mask = covered(_xy(minors), pos[live], config.sensing_range_m)
    return [e for e, m in zip(minors, mask) if m]


def deterred_count(major_events_in_cycle: Sequence[CrimeEvent],
                   assignments: Sequence[UavAssignment], config: WorldConfig) -> int:
    pos = positions_of(assignments, config)
    det = [i for i, a in enumerate(assignments) if a.role == Role.DETERRENCE]
    majors = [e for e in major_events_in_cycle if e.severity == Severity.MAJOR]
    return int(covered(_xy(majors), pos[det], config.deterrence_range_m).sum())


def assignments_from_arrays(cells: Iterable[int], roles: Iterable[int]) -> list[UavAssignment]:
    return [UavAssignment(i, int(c), Role(int(r))) for i, (c, r) in enumerate(zip(cells, roles))]


def format_assignments_csv(assignments: Sequence[UavAssignment]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["uav_id", "cell_index", "role"])
    for a in assignments:
        w.writerow([a.uav_id, a.cell_index, a.role.name.lower()])
    return buf.getvalue()


def parse_assignments_csv(text: str) -> list[UavAssignment]:
    rows = list(csv.DictReader(io.StringIO(text)))
    try:
        return [UavAssignment(int(r["uav_id"]), int(r["cell_index"]), Role[r["role"].upper()])
                for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed assignment row: {exc}") from exc
