"""Episodic UAV placement environment over replayed crime cycles.

One step is one weekly control window. The agent assigns every UAV a grid
cell and a role; the reward is the number of major crimes inside the range
of a deterrence UAV during that window. Misdemeanors captured by connected
sensing UAVs are appended to the count history, and the next observation is
the forecaster's per-block prediction on that history.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .crime import CrimeEvent, Severity, group_by_cycle
from .exceptions import ConfigError, DomainError, SkywatchError, StateError
from .predictor import LstmForecaster, predict_counts
from .world import Role, WorldConfig, build_grid, covered, reachable_mask


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict

    def __iter__(self):
        return iter((self.observation, self.reward, self.done, self.info))


@dataclass
class EpisodeStats:
    potential: int = 0
    deterred: int = 0
    sensed: int = 0
    steps: int = 0
    rewards: list = field(default_factory=list)


def deterrence_ratio(stats: EpisodeStats) -> float:
    """Deterred majors over potential majors; zero when there were none."""
    return stats.deterred / stats.potential if stats.potential else 0.0


@dataclass
class _Cycle:
    date: dt.date
    majors: np.ndarray
    minors: np.ndarray
    minor_blocks: np.ndarray
    minor_counts: np.ndarray


class CrimeDeterrenceEnv:
    """Gym-style ``reset`` / ``step`` environment.

    ``events`` are replayed in the order of ``cycles`` (one date per control
    window). Episodes are consecutive runs of ``episode_cycles`` windows;
    ``reset(seed=...)`` rewinds to the first run and ``reset()`` moves on to
    the next, wrapping around. Scoring never removes events from the replay.
    """

    def __init__(self, events: Sequence[CrimeEvent], cycles: Sequence[dt.date],
                 world: WorldConfig, predictor: LstmForecaster | None,
                 episode_cycles: int | None = None, initial_history=None):
        if not cycles:
            raise ConfigError("environment needs at least one control cycle")
        if episode_cycles is not None and episode_cycles < 1:
            raise ConfigError("episode_cycles must be at least 1")
        self.world = world
        self.predictor = predictor
        self.grid = build_grid(world)
        self.n_uavs = world.uav_total
        self.n_blocks = world.block_count
        self.episode_cycles = episode_cycles or len(cycles)
        self.window_len = predictor.window_len if predictor is not None else 1
        self.initial_history = (np.zeros((self.window_len, self.n_blocks)) if initial_history is None
                                else np.asarray(initial_history, dtype=float)[-self.window_len:])
        self.cycles = [self._pack(d, evs) for d, evs in zip(cycles, group_by_cycle(events, cycles))]
        self.n_episodes = -(-len(self.cycles) // self.episode_cycles)
        self._episode = -1
        self._t = None
        self.stats = EpisodeStats()

    def _pack(self, date, evs) -> _Cycle:
        majors = np.array([(e.x_m, e.y_m) for e in evs if e.severity == Severity.MAJOR]).reshape(-1, 2)
        minor_ev = [e for e in evs if e.severity == Severity.MISDEMEANOR]
        minors = np.array([(e.x_m, e.y_m) for e in minor_ev]).reshape(-1, 2)
        blocks = np.array([e.block_id for e in minor_ev], dtype=np.int64)
        counts = np.bincount(blocks, minlength=self.n_blocks).astype(float)
        return _Cycle(date, majors, minors, blocks, counts)

    # ---- spaces -------------------------------------------------------------------

    @property
    def action_nvec(self) -> list[int]:
        """Sizes of the factored action heads: one cell head then one role head per UAV."""
        return [len(self.grid)] * self.n_uavs + [len(Role)] * self.n_uavs

    @property
    def observation_dim(self) -> int:
        return self.n_blocks

    # ---- dynamics ---------------------------------------------------------------------

    def _episode_range(self) -> range:
        start = self._episode * self.episode_cycles
        return range(start, min(start + self.episode_cycles, len(self.cycles)))

    def _observe(self) -> np.ndarray:
        return predict_counts(self.predictor, self.history)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if self.predictor is None:
            raise ConfigError("environment has no predictor checkpoint")
        self._episode = 0 if seed is not None or self._episode < 0 else (self._episode + 1) % self.n_episodes
        span = self._episode_range()
        self._t = span.start
        first = span.start
        prev = [c.minor_counts for c in self.cycles[max(0, first - self.window_len):first]]
        self.history = np.vstack([self.initial_history] + prev)[-self.window_len:]
        self.stats = EpisodeStats()
        return self._observe()

    def decode_action(self, action) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(action, dict):
            cells, roles = action.get("cells"), action.get("roles")
        else:
            flat = np.asarray(action)
            if flat.ndim != 1 or flat.size != 2 * self.n_uavs:
                raise DomainError(f"action must hold {2 * self.n_uavs} integers, got shape {flat.shape}")
            cells, roles = flat[: self.n_uavs], flat[self.n_uavs:]
        try:
            cells = np.asarray(cells, dtype=np.int64).reshape(-1)
            roles = np.asarray(roles, dtype=np.int64).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise DomainError(f"malformed action: {exc}") from exc
        if cells.size != self.n_uavs or roles.size != self.n_uavs:
            raise DomainError(f"action must cover exactly {self.n_uavs} UAVs")
        if cells.min() < 0 or cells.max() >= len(self.grid):
            raise DomainError("cell index outside the placement grid")
        if roles.min() < 0 or roles.max() >= len(Role):
            raise DomainError("role outside {sensing, computing, deterrence}")
        return cells, roles

    def score(self, cells: np.ndarray, roles: np.ndarray, cycle: _Cycle) -> dict:
        """Deterrence and sensing outcome of one assignment on one cycle."""
        w = self.world
        pos = self.grid[cells]
        reach = reachable_mask(pos, roles, w.comm_range_m)
        det = roles == Role.DETERRENCE
        deterred = int(covered(cycle.majors, pos[det], w.deterrence_range_m).sum())
        live = (roles == Role.SENSING) & reach
        sensed_mask = covered(cycle.minors, pos[live], w.sensing_range_m)
        sensed_counts = np.bincount(cycle.minor_blocks[sensed_mask], minlength=self.n_blocks).astype(float)
        return {
            "potential_majors": int(len(cycle.majors)),
            "deterred": deterred,
            "sensed": int(sensed_mask.sum()),
            "sensed_counts": sensed_counts,
            "n_sensing": int((roles == Role.SENSING).sum()),
            "n_computing": int((roles == Role.COMPUTING).sum()),
            "n_deterrence": int(det.sum()),
            "reachable_sensing": int(live.sum()),
        }

    def step(self, action) -> EnvStep:
        if self._t is None:
            raise StateError("step called before reset")
        span = self._episode_range()
        if self._t >= span.stop:
            raise StateError("step called on a finished episode")
        cells, roles = self.decode_action(action)
        cycle = self.cycles[self._t]
        info = self.score(cells, roles, cycle)
        self.history = np.vstack([self.history[1:], info.pop("sensed_counts")])
        info["cycle_date"] = cycle.date.isoformat()
        self._t += 1
        self.stats.potential += info["potential_majors"]
        self.stats.deterred += info["deterred"]
        self.stats.sensed += info["sensed"]
        self.stats.steps += 1
        self.stats.rewards.append(float(info["deterred"]))
        return EnvStep(self._observe(), float(info["deterred"]), self._t >= span.stop, info)

    def render(self) -> str:
        if self._t is None:
            return "not started"
        return (f"episode {self._episode} cycle {self._t - self._episode_range().start}/"
                f"{len(self._episode_range())} deterred {self.stats.deterred}/{self.stats.potential}")


def random_deterrence_action(rng: np.random.Generator, grid_size: int, n_uavs: int) -> np.ndarray:
    """Every UAV on deterrence duty at a uniformly random cell."""
    return np.concatenate([rng.integers(grid_size, size=n_uavs), np.full(n_uavs, int(Role.DETERRENCE))])


def episode_log_csv(rows: list[dict]) -> str:
    cols = ["step", "cycle_date", "reward", "potential_majors", "deterred", "sensed",
            "n_sensing", "n_computing", "n_deterrence", "reachable_sensing"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for i, r in enumerate(rows):
        w.writerow({"step": i, **r})
    return buf.getvalue()


def serve_stdio(env: CrimeDeterrenceEnv, instream=None, outstream=None) -> None:
    """Drive ``env`` over newline-delimited JSON.

    Requests: ``{"cmd": "reset", "seed": 0}``,
    ``{"cmd": "step", "action": {"cells": [...], "roles": [...]}}`` (or a
    flat integer list), ``{"cmd": "render"}``, ``{"cmd": "spec"}`` and
    ``{"cmd": "close"}``. Each request gets one JSON line back; failures come
    back as ``{"error": ..., "kind": ...}`` and do not end the session.
    """
    instream = instream or sys.stdin
    outstream = outstream or sys.stdout
    for line in instream:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
            cmd = msg.get("cmd")
            if cmd == "reset":
                reply = {"observation": env.reset(msg.get("seed")).tolist()}
            elif cmd == "step":
                obs, reward, done, info = env.step(msg["action"])
                reply = {"observation": obs.tolist(), "reward": reward, "done": done, "info": info}
            elif cmd == "render":
                reply = {"text": env.render()}
            elif cmd == "spec":
                reply = {"action_nvec": env.action_nvec, "observation_dim": env.observation_dim}
            elif cmd == "close":
                outstream.write(json.dumps({"closed": True}) + "\n")
                outstream.flush()
                return
            else:
                raise DomainError(f"unknown command {cmd!r}")
        except (SkywatchError, json.JSONDecodeError, KeyError, AttributeError) as exc:
            reply = {"error": str(exc), "kind": type(exc).__name__}
        outstream.write(json.dumps(reply, sort_keys=True) + "\n")
        outstream.flush()
