"""Experiment runners behind the command-line subcommands.

Each ``cmd_*`` function reads its inputs, computes everything in memory and
only then writes its outputs into the output directory, so a failure never
leaves partial artifacts behind. All randomness comes from named
sub-streams of the experiment seed.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import crime
from .config import ExperimentConfig, dump_config
from .crime import BlockGeometry, CrimeEvent, Severity
from .di import (PROTOCOLS, DeskNetClassifier, SplitPlan, fine_tune_with_dropout, make_patterns,
                 plotdata_text, summarize_sweep, sweep_csv, sweep_eval)
from .env import CrimeDeterrenceEnv, random_deterrence_action
from .exceptions import ConfigError, DataError
from .nn.checkpoint import write_bytes_atomic
from .ppo import PPOAgent
from .predictor import LstmForecaster, make_training_set
from .rng import substream
from .synth import SyntheticCrimeConfig, generate_rows, write_csv
from .world import WorldConfig, build_grid, covered

SWEEP_COLUMNS = ("range_m", "trial", "deterred", "potential", "ratio")
PLOT_COLUMNS = ("range_m", "mean_ratio", "stderr", "n", "log10_range")

EVENTS_TRAIN = "events_train.csv"
EVENTS_TEST = "events_test.csv"
PREDICTOR = "predictor.ckpt"


def seed_int(seed: int, name: str, *extra: int) -> int:
    """A plain integer seed drawn from a named sub-stream."""
    return int(substream(seed, name, *extra).integers(2**31 - 1))


def range_tag(r: float) -> str:
    return f"{float(r):g}"


def write_outputs(out_dir: Path, files: dict[str, str | bytes]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(files):
        payload = files[name]
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        write_bytes_atomic(out_dir / name, payload)
        written.append(out_dir / name)
    return written


def _require(path: Path, what: str, hint: str, error=DataError) -> Path:
    if not path.is_file():
        raise error(f"{what} not found at {path}; {hint}")
    return path


# ---- data --------------------------------------------------------------------------

def load_geometry(cfg: ExperimentConfig) -> BlockGeometry:
    if cfg.data.geometry is not None:
        geom = BlockGeometry.load(cfg.data.geometry)
    else:
        syn = SyntheticCrimeConfig(**cfg.data.synthetic)
        geom = crime.synthetic_tiling(syn.rows, syn.cols, syn.block_m, region=syn.region)
    if geom.block_count != cfg.world.block_count:
        raise ConfigError(f"geometry has {geom.block_count} blocks but world.block_count is "
                          f"{cfg.world.block_count}")
    return geom


def _window_start(cfg: ExperimentConfig) -> dt.time:
    hh, mm = cfg.data.window_start.split(":")
    return dt.time(int(hh), int(mm))


def cmd_ingest(cfg: ExperimentConfig) -> dict[str, str]:
    """Raw CSV (or synthetic records) to canonical train and folded test events."""
    geom = load_geometry(cfg)
    files: dict[str, str] = {}
    with tempfile.TemporaryDirectory() as tmp:
        if cfg.data.csv is None:
            syn = SyntheticCrimeConfig(**cfg.data.synthetic)
            text = write_csv(generate_rows(syn, seed_int(cfg.seed, "synthetic-data"), geom))
            files["raw_crimes.csv"] = text
            path = Path(tmp) / "raw.csv"
            path.write_text(text, encoding="utf-8")
        else:
            path = Path(cfg.data.csv)
        report = crime.parse_csv(path, crime.SchemaConfig.from_mapping(cfg.data.schema))
    kept = crime.filter_window(report.events, cfg.data.weekday, _window_start(cfg),
                               region=cfg.data.region)
    majors = cfg.data.major_types or crime.DEFAULT_MAJOR_TYPES
    events, dropped = crime.to_events(kept, geom, majors)
    train, test = crime.split_years(events, cfg.data.train_years, cfg.data.test_years)
    if not train or not test:
        raise DataError(f"need events in both splits; got {len(train)} train, {len(test)} test")
    test_years = range(cfg.data.test_years[0], cfg.data.test_years[1] + 1)
    folded = crime.fold_years(test, test_years)
    files[EVENTS_TRAIN] = crime.format_events_csv(train)
    files[EVENTS_TEST] = crime.format_events_csv(folded)
    n_major = sum(e.severity == Severity.MAJOR for e in events)
    files["ingest_report.txt"] = (
        f"rows_parsed {len(report.events)}\nrows_skipped {report.skipped}\n"
        f"in_window {len(kept)}\nunlocated {dropped}\nevents {len(events)}\n"
        f"majors {n_major}\ntrain_events {len(train)}\ntest_events_folded {len(folded)}\n")
    return files


def load_events(cfg: ExperimentConfig) -> tuple[list[CrimeEvent], list[CrimeEvent]]:
    out = Path(cfg.out)
    hint = "run the ingest subcommand first"
    train = crime.read_events_csv(_require(out / EVENTS_TRAIN, "training events", hint))
    test = crime.read_events_csv(_require(out / EVENTS_TEST, "test events", hint))
    return train, test


# ---- predictor -------------------------------------------------------------------------

def minor_counts(events: Sequence[CrimeEvent], cycles: Sequence[dt.date], blocks: int) -> np.ndarray:
    minors = [e for e in events if e.severity == Severity.MISDEMEANOR]
    return crime.block_counts(minors, blocks, buckets=list(cycles))


def train_cycles(cfg: ExperimentConfig) -> list[dt.date]:
    return crime.year_cycles(*cfg.data.train_years, weekday=cfg.data.weekday)


def cmd_train_predictor(cfg: ExperimentConfig) -> tuple[LstmForecaster, dict[str, str]]:
    train, _ = load_events(cfg)
    counts = minor_counts(train, train_cycles(cfg), cfg.world.block_count)
    p = cfg.predictor
    model = LstmForecaster(hidden_units=p.hidden_units, window_len=p.window_len, epochs=p.epochs,
                           batch_size=p.batch_size, learning_rate=p.learning_rate,
                           standardize=p.standardize,
                           random_state=seed_int(cfg.seed, "predictor-init"))
    model.fit_series(counts)
    X, y = make_training_set(counts, p.window_len)
    mse = float(np.mean((model.predict(X) - y) ** 2))
    mean_mse = float(np.mean((y - y.mean(axis=0)) ** 2))
    files = {"predictor_loss.csv": model.loss_log_csv(),
             "predictor_eval.txt": f"train_mse {mse!r}\nmean_predictor_mse {mean_mse!r}\n"}
    return model, files


def load_predictor(cfg: ExperimentConfig) -> LstmForecaster:
    path = _require(Path(cfg.out) / PREDICTOR, "predictor checkpoint",
                    "run train-predictor first", ConfigError)
    model = LstmForecaster.load(path)
    if model.n_blocks_ != cfg.world.block_count:
        raise ConfigError(f"predictor covers {model.n_blocks_} blocks, world has {cfg.world.block_count}")
    return model


# ---- environments --------------------------------------------------------------------------

def policy_env(cfg: ExperimentConfig, train: Sequence[CrimeEvent], predictor, world: WorldConfig
               ) -> CrimeDeterrenceEnv:
    """Training environment: the policy years folded into one year.

    The years before them seed the count history.
    """
    first, last = cfg.data.policy_years
    years = range(first, last + 1)
    blocks = cfg.world.block_count
    folded = crime.fold_years([e for e in train if first <= e.timestamp.year <= last], years)
    history = minor_counts([e for e in train if e.timestamp.year < first],
                           crime.year_cycles(cfg.data.train_years[0], first - 1, cfg.data.weekday),
                           blocks)
    return CrimeDeterrenceEnv(folded, crime.year_cycles(last, last, cfg.data.weekday), world,
                              predictor, cfg.env.episode_cycles, history)


def eval_env(cfg: ExperimentConfig, train: Sequence[CrimeEvent], test: Sequence[CrimeEvent],
             predictor, world: WorldConfig) -> CrimeDeterrenceEnv:
    """Evaluation environment over the folded test year; history from the training years."""
    ref = cfg.data.test_years[1]
    history = minor_counts(train, train_cycles(cfg), cfg.world.block_count)
    return CrimeDeterrenceEnv(test, crime.year_cycles(ref, ref, cfg.data.weekday), world,
                              predictor, cfg.env.episode_cycles, history)


def eval_cycles(cfg: ExperimentConfig) -> list[dt.date]:
    ref = cfg.data.test_years[1]
    return crime.year_cycles(ref, ref, cfg.data.weekday)


# ---- policy training and sweeps ----------------------------------------------------------

def policy_path(cfg: ExperimentConfig, r: float) -> Path:
    return Path(cfg.out) / cfg.sweep.policy_template.format(range=range_tag(r))


def cmd_train_policy(cfg: ExperimentConfig, log: Callable[[str], None] | None = None):
    """One PPO policy per deterrence range; returns ``{range: agent}`` and curve files."""
    train, _ = load_events(cfg)
    predictor = load_predictor(cfg)
    agents, files = {}, {}
    for i, r in enumerate(cfg.sweep.ranges):
        env = policy_env(cfg, train, predictor, cfg.world.with_range(r))
        agent = PPOAgent(**_ppo_params(cfg), random_state=seed_int(cfg.seed, "policy-init", i))
        cb = None
        if log is not None:
            cb = lambda row, r=r: log(f"range {range_tag(r)} update {row['update_index']} "
                                      f"steps {row['env_steps']} mean_reward {row['mean_reward']:.2f}")
        agent.fit(env, callback=cb)
        agents[float(r)] = agent
        files[f"learning_curve_r{range_tag(r)}.csv"] = agent.learning_curve_csv()
    return agents, files


def _ppo_params(cfg: ExperimentConfig) -> dict:
    return asdict(cfg.ppo)


def run_episode(env: CrimeDeterrenceEnv, act: Callable[[np.ndarray], np.ndarray]) -> tuple[int, int]:
    """Play one full episode from the first cycle; returns ``(deterred, potential)``."""
    obs = env.reset(seed=0)
    done = False
    while not done:
        obs, _, done, _ = env.step(act(obs))
    return env.stats.deterred, env.stats.potential


def run_deterrence_sweep(agents: dict[float, PPOAgent], env_for_range: Callable[[float], CrimeDeterrenceEnv],
                         ranges: Sequence[float], trials: int, seed: int,
                         deterministic: bool = False) -> list[dict]:
    """Evaluate the trained policy of every range over ``trials`` episodes."""
    rows = []
    for i, r in enumerate(ranges):
        env = env_for_range(r)
        agent = agents[float(r)]
        for t in range(trials):
            rng = substream(seed, "policy-eval", i, t)
            deterred, potential = run_episode(
                env, lambda obs: agent.predict(obs, deterministic=deterministic, rng=rng))
            rows.append(_sweep_row(r, t, deterred, potential))
    return rows


def _sweep_row(r, t, deterred, potential) -> dict:
    ratio = deterred / potential if potential else 0.0
    return {"range_m": float(r), "trial": t, "deterred": int(deterred),
            "potential": int(potential), "ratio": ratio}


def run_random_baseline(events: Sequence[CrimeEvent], cycles: Sequence[dt.date], world: WorldConfig,
                        ranges: Sequence[float], trials: int, seed: int) -> list[dict]:
    """All UAVs on deterrence at uniformly random cells, redrawn every cycle."""
    grid = build_grid(world)
    majors = [np.array([(e.x_m, e.y_m) for e in group if e.severity == Severity.MAJOR]).reshape(-1, 2)
              for group in crime.group_by_cycle(events, cycles)]
    rows = []
    for i, r in enumerate(ranges):
        for t in range(trials):
            rng = substream(seed, "baseline-placement", i, t)
            deterred = potential = 0
            for pts in majors:
                cells = random_deterrence_action(rng, len(grid), world.uav_total)[:world.uav_total]
                deterred += int(covered(pts, grid[cells], float(r)).sum())
                potential += len(pts)
            rows.append(_sweep_row(r, t, deterred, potential))
    return rows


def format_sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([range_tag(row["range_m"]), row["trial"], row["deterred"], row["potential"],
                    repr(float(row["ratio"]))])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
        raise DataError(f"sweep CSV must have columns {SWEEP_COLUMNS}, got {reader.fieldnames}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        try:
            rows.append({"range_m": float(rec["range_m"]), "trial": int(rec["trial"]),
                         "deterred": int(rec["deterred"]), "potential": int(rec["potential"]),
                         "ratio": float(rec["ratio"])})
        except (TypeError, ValueError) as exc:
            raise DataError(f"sweep CSV line {lineno}: {exc}") from exc
    return rows


def plot_summary(rows: Sequence[dict]) -> list[dict]:
    by_range: dict[float, list[float]] = {}
    for row in rows:
        by_range.setdefault(row["range_m"], []).append(row["ratio"])
    out = []
    for r in sorted(by_range):
        vals = np.asarray(by_range[r])
        stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append({"range_m": r, "mean_ratio": float(vals.mean()), "stderr": stderr,
                    "n": len(vals), "log10_range": math.log10(r)})
    return out


def emit_plotdata(sweep_csv_text: str) -> str:
    """Per-range mean ratio and standard error, with a log10 range column for log axes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for s in plot_summary(parse_sweep_csv(sweep_csv_text)):
        w.writerow([range_tag(s["range_m"]), f"{s['mean_ratio']:.6f}", f"{s['stderr']:.6f}",
                    s["n"], f"{s['log10_range']:.6f}"])
    return buf.getvalue()


def cmd_eval_sweep(cfg: ExperimentConfig) -> dict[str, str]:
    agents = {}
    for r in cfg.sweep.ranges:
        path = _require(policy_path(cfg, r), f"policy checkpoint for range {range_tag(r)}",
                        "run train-policy first", ConfigError)
        agents[float(r)] = PPOAgent.load(path)
    train, test = load_events(cfg)
    predictor = load_predictor(cfg)
    rows = run_deterrence_sweep(
        agents, lambda r: eval_env(cfg, train, test, predictor, cfg.world.with_range(r)),
        cfg.sweep.ranges, cfg.sweep.trials, cfg.seed, cfg.sweep.deterministic)
    text = format_sweep_csv(rows)
    return {"deterrence_sweep.csv": text, "deterrence_plot.csv": emit_plotdata(text)}


def cmd_baseline(cfg: ExperimentConfig) -> dict[str, str]:
    _, test = load_events(cfg)
    rows = run_random_baseline(test, eval_cycles(cfg), cfg.world, cfg.sweep.ranges,
                               cfg.sweep.trials, cfg.seed)
    text = format_sweep_csv(rows)
    return {"baseline_sweep.csv": text, "baseline_plot.csv": emit_plotdata(text)}


# ---- distributed inference -------------------------------------------------------------------

def model_tag(rate: float | None) -> str:
    return "conventional" if rate is None else f"dropout_r{rate:g}"


def di_data(cfg: ExperimentConfig):
    d = cfg.di
    train = make_patterns(d.train_size, seed_int(cfg.seed, "di-train-data"), d.image_size,
                          noise=d.noise)
    test = make_patterns(d.test_size, seed_int(cfg.seed, "di-test-data"), d.image_size,
                         noise=d.noise)
    return train, test


def cmd_di_train(cfg: ExperimentConfig) -> tuple[dict[str, DeskNetClassifier], dict[str, str]]:
    d = cfg.di
    (X, y), (Xt, yt) = di_data(cfg)
    base = DeskNetClassifier(channels=tuple(d.channels), epochs=d.epochs, batch_size=d.batch_size,
                             learning_rate=d.learning_rate,
                             random_state=seed_int(cfg.seed, "di-init")).fit(X, y)
    models = {model_tag(None): base}
    tuned = fine_tune_with_dropout(base, d.rates, X, y, seed=seed_int(cfg.seed, "di-finetune"),
                                   epochs=d.fine_tune_epochs)
    for rate, model in tuned.items():
        models[model_tag(rate)] = model
    lines = ["model_tag,dropout_rate,clean_accuracy"]
    for tag, model in models.items():
        lines.append(f"{tag},{model.dropout_rate!r},{model.score(Xt, yt)!r}")
    return models, {"di_train.csv": "\n".join(lines) + "\n"}


def load_di_models(cfg: ExperimentConfig) -> dict[str, DeskNetClassifier]:
    models = {}
    for rate in [None, *cfg.di.rates]:
        tag = model_tag(rate)
        path = _require(Path(cfg.out) / f"desknet_{tag}.ckpt", f"model {tag}",
                        "run di-train first", ConfigError)
        models[tag] = DeskNetClassifier.load(path)
    return models


def cmd_di_sweep(cfg: ExperimentConfig) -> dict[str, str]:
    d = cfg.di
    models = load_di_models(cfg)
    _, (Xt, yt) = di_data(cfg)
    plans = [SplitPlan(int(a), int(b)) for a, b in d.plans]
    files = {}
    for k, protocol in enumerate(PROTOCOLS):
        rows = sweep_eval(models, plans, d.p_grid, Xt, yt, range(d.seeds), protocol, d.fixed_p,
                          d.elements_per_packet, d.rescale, base_seed=seed_int(cfg.seed, "loss-links", k))
        suffix = protocol.split("_")[1]
        files[f"di_sweep_{suffix}.csv"] = sweep_csv(rows)
        files[f"di_plot_{suffix}.dat"] = plotdata_text(summarize_sweep(rows, protocol), protocol)
    return files


def config_snapshot(cfg: ExperimentConfig) -> str:
    return dump_config(cfg)
