import csv
import io
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from skywatch import experiments as ex
from skywatch.cli import main
from skywatch.config import ExperimentConfig, apply_env_overrides, dump_config, load_config
from skywatch.crime import CrimeEvent, Severity, year_cycles
from skywatch.exceptions import ConfigError, DataError
from skywatch.world import WorldConfig, build_grid

SMALL = {
    "seed": 3,
    "data": {"synthetic": {"start_year": 2010, "end_year": 2016},
             "train_years": [2010, 2013], "policy_years": [2012, 2013]},
    "predictor": {"hidden_units": 8, "epochs": 2},
    "ppo": {"n_steps": 64, "minibatch_size": 32, "epochs_per_update": 1, "total_steps": 128},
    "sweep": {"ranges": [80, 1280], "trials": 2},
    "di": {"train_size": 120, "test_size": 60, "channels": [2, 2, 2, 2, 2], "epochs": 1,
           "fine_tune_epochs": 1, "seeds": 2, "p_grid": [0.0, 0.5]},
}


def write_cfg(tmp_path, raw, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


# ---- config ------------------------------------------------------------------------

def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = load_config(None, environ={})
    assert cfg.sweep.ranges == [80.0, 160.0, 320.0, 640.0, 1280.0]
    assert cfg.world.uav_total == 20 and cfg.world.block_count == 12
    again = load_config(write_cfg(tmp_path, yaml.safe_load(dump_config(cfg))), environ={})
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"ppo": {"clip_epsilon": 0}},
    {"ppo": {"gamma": 1.5}},
    {"ppo": {"learning_rat": 1e-3}},
    {"world": {"comm_range_m": -1}},
    {"sweep": {"trials": 0}},
    {"sweep": {"policy_template": "policy.ckpt"}},
    {"di": {"plans": [[3, 1]]}},
    {"di": {"rates": [1.0]}},
    {"data": {"train_years": [2005, 2015]}},
    {"data": {"csv": "/does/not/exist.csv"}},
    {"data": {"schema": {"colour": "x"}}},
    {"env": {"episode_cycles": 0}},
    {"seed": -1},
])
def test_invalid_configs_rejected(tmp_path, raw):
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, raw), environ={})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_env_overrides():
    raw = apply_env_overrides({"ppo": {"n_steps": 10}},
                              {"SKYWATCH_PPO__LEARNING_RATE": "1e-3", "SKYWATCH_SEED": "7",
                               "SKYWATCH_SWEEP__RANGES": "[80, 160]", "OTHER": "x"})
    assert raw == {"ppo": {"n_steps": 10, "learning_rate": 1e-3}, "seed": 7,
                   "sweep": {"ranges": [80, 160]}}
    cfg = load_config(None, environ={"SKYWATCH_WORLD__UAV_TOTAL": "5"})
    assert cfg.world.uav_total == 5
    with pytest.raises(ConfigError):
        apply_env_overrides({}, {"SKYWATCH_A__B__C": "1"})


def test_cli_overrides():
    cfg = ExperimentConfig().with_overrides(seed=5, out="x", trials=3)
    assert (cfg.seed, cfg.out, cfg.sweep.trials) == (5, "x", 3)
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(trials=0)


# ---- baseline and plot data ---------------------------------------------------------

def _major(day, x, y):
    import datetime as dt
    return CrimeEvent(dt.datetime.combine(day, dt.time(20)), x, y, 0, Severity.MAJOR)


def test_baseline_zero_majors_gives_zero_ratios():
    cycles = year_cycles(2016, 2016)[:3]
    rows = ex.run_random_baseline([], cycles, WorldConfig(placement_radius_m=300), [80, 1280], 2, 0)
    assert all(r["ratio"] == 0.0 and r["potential"] == 0 for r in rows)


def test_baseline_huge_range_covers_everything():
    cycles = year_cycles(2016, 2016)[:4]
    evs = [_major(d, 100.0 * k, -50.0 * k) for k, d in enumerate(cycles)]
    rows = ex.run_random_baseline(evs, cycles, WorldConfig(placement_radius_m=300), [1e7], 3, 1)
    assert all(r["ratio"] == 1.0 for r in rows)


def test_single_uav_coverage_matches_area_oracle():
    world = WorldConfig(placement_radius_m=1000.0, grid_spacing_m=20.0, uav_total=1)
    cycles = year_cycles(2016, 2016)
    evs = [_major(d, 0.0, 0.0) for d in cycles]
    r = 300.0
    rows = ex.run_random_baseline(evs, cycles, world, [r], 40, 2)
    hits = sum(row["deterred"] for row in rows)
    n = sum(row["potential"] for row in rows)
    # oracle: fraction of grid cells (uniform placement) within r of the crime
    grid = build_grid(world)
    p = float(np.mean(np.hypot(grid[:, 0], grid[:, 1]) <= r))
    assert p == pytest.approx((r / 1000.0) ** 2, rel=0.05)  # disk-area ratio
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def _sweep_fixture():
    rng = np.random.default_rng(0)
    rows = [ex._sweep_row(r, t, int(d), 50) for r in (80.0, 160.0)
            for t, d in enumerate(rng.integers(0, 50, size=10))]
    return rows, ex.format_sweep_csv(rows)


def test_plotdata_matches_arithmetic_oracle():
    rows, text = _sweep_fixture()
    lines = list(csv.DictReader(io.StringIO(ex.emit_plotdata(text))))
    assert list(lines[0]) == ["range_m", "mean_ratio", "stderr", "n", "log10_range"]
    for line, r in zip(lines, (80.0, 160.0)):
        ratios = [row["ratio"] for row in rows if row["range_m"] == r]
        assert float(line["mean_ratio"]) == pytest.approx(sum(ratios) / len(ratios), abs=1e-6)
        assert float(line["stderr"]) == pytest.approx(np.std(ratios, ddof=1) / math.sqrt(10), abs=1e-6)
        assert int(line["n"]) == 10
        assert float(line["log10_range"]) == pytest.approx(math.log10(r))


def test_plotdata_single_row_and_malformed():
    text = ex.format_sweep_csv([ex._sweep_row(80, 0, 2, 4)])
    lines = ex.emit_plotdata(text).splitlines()
    assert len(lines) == 2 and lines[1].split(",")[1:4] == ["0.500000", "0.000000", "1"]
    with pytest.raises(DataError):
        ex.emit_plotdata("range_m,trial\n80,0\n")
    with pytest.raises(DataError):
        ex.emit_plotdata("range_m,trial,deterred,potential,ratio\n80,0,x,4,0.5\n")


# ---- command line ----------------------------------------------------------------------

def run_all(tmp_path, name, seed=None):
    out = tmp_path / name
    cfg = write_cfg(tmp_path, SMALL)
    extra = [] if seed is None else ["--seed", str(seed)]
    for cmd in ("ingest", "train-predictor", "train-policy", "eval-sweep", "baseline",
                "di-train", "di-sweep"):
        assert main([cmd, "--config", str(cfg), "--out", str(out), *extra]) == 0, cmd
    return out


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return run_all(tmp, "a"), run_all(tmp, "b")


def test_every_subcommand_rerun_is_byte_identical(two_runs):
    a, b = two_runs
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    csvs = [n for n in names if n.endswith((".csv", ".dat", ".txt", ".ckpt"))]
    assert len(csvs) > 15
    for n in names:
        if n.startswith("config_"):
            # snapshots record their own output directory and nothing else differs
            sa = yaml.safe_load((a / n).read_text())
            sb = yaml.safe_load((b / n).read_text())
            assert (sa.pop("out"), sb.pop("out")) == (str(a), str(b))
            assert sa == sb, n
            continue
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_output_schemas(two_runs):
    a, _ = two_runs
    assert (a / "deterrence_sweep.csv").read_text().splitlines()[0] == "range_m,trial,deterred,potential,ratio"
    assert (a / "baseline_plot.csv").read_text().splitlines()[0] == "range_m,mean_ratio,stderr,n,log10_range"
    assert (a / "di_sweep_p12.csv").read_text().splitlines()[0] == "model_tag,cut_a,cut_b,p12,p23,seed,accuracy"
    assert (a / "learning_curve_r80.csv").read_text().startswith("update_index,env_steps,mean_reward")
    assert len((a / "deterrence_sweep.csv").read_text().splitlines()) == 1 + 2 * 2


def test_different_seed_changes_outputs(tmp_path, two_runs):
    a, _ = two_runs
    out = tmp_path / "c"
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["ingest", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    assert (out / "events_train.csv").read_bytes() != (a / "events_train.csv").read_bytes()


def test_config_error_exit_code_and_no_output(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"ppo": {"clip_epsilon": -1}})
    out = tmp_path / "never"
    assert main(["ingest", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "ConfigError" in capsys.readouterr().err


def test_missing_checkpoint_is_config_error(tmp_path, two_runs):
    a, _ = two_runs
    out = tmp_path / "partial"
    out.mkdir()
    for name in ("events_train.csv", "events_test.csv", "predictor.ckpt"):
        (out / name).write_bytes((a / name).read_bytes())
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["eval-sweep", "--config", str(cfg), "--out", str(out)]) == 2
    assert not (out / "deterrence_sweep.csv").exists()


def test_missing_inputs_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["train-predictor", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 3
    assert not (tmp_path / "empty").exists()


def test_malformed_crime_csv_is_data_error(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("ID,Primary Type\n1,THEFT\n")
    cfg = write_cfg(tmp_path, {**SMALL, "data": {**SMALL["data"], "csv": str(raw)}})
    assert main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_numeric_error_exit_code(tmp_path, two_runs, monkeypatch):
    from skywatch.exceptions import NumericError

    def boom(cfg):
        raise NumericError("non-finite loss")
    monkeypatch.setattr(ex, "cmd_baseline", boom)
    a, _ = two_runs
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["baseline", "--config", str(cfg), "--out", str(a)]) == 4


def test_trials_flag(tmp_path, two_runs):
    a, _ = two_runs
    out = tmp_path / "t"
    out.mkdir()
    for name in ("events_train.csv", "events_test.csv"):
        (out / name).write_bytes((a / name).read_bytes())
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["baseline", "--config", str(cfg), "--out", str(out), "--trials", "3"]) == 0
    assert len((out / "baseline_sweep.csv").read_text().splitlines()) == 1 + 2 * 3


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
