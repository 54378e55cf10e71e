from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from percov import maps
from percov.cli import EXIT_INFEASIBLE, EXIT_NONCONVERGED, EXIT_OK, EXIT_USAGE, main
from percov.config import OUT_ENV, ConfigError, load_config
from percov.environment import environment_to_pgm_bytes, load_environment
from percov.partition import TABLE_GAINS, compute_workload_map, voronoi_baseline


def _pgm(path, name="two_rooms"):
    path.write_bytes(environment_to_pgm_bytes(maps.builtin(name)))
    return str(path)


# --- config -----------------------------------------------------------------

def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.map_name == "rooms" and cfg.rho_max == 20.0 and cfg.partition.schedule == TABLE_GAINS["rooms"][0]
    ini = tmp_path / "a.cfg"
    ini.write_text("[map]\nname = open_rooms\n[partition]\nmode = wg\nn_robots = 3\ncapabilities = 2,1,1\n"
                   "[robots]\nspeed = 0.2\n[sim]\nsteps = 40\nnormalization = squared\n"
                   "[montecarlo]\nseeds = 4\n")
    cfg = load_config(ini, {"seed": 9, "steps": None})
    assert cfg.partition.mode == "WG" and cfg.partition.seed == 9 and cfg.partition.capabilities == (2, 1, 1)
    assert cfg.steps == 40 and cfg.speed == 0.2 and cfg.normalization == "squared"
    assert cfg.seeds == (0, 1, 2, 3)
    assert cfg.partition.k_g == TABLE_GAINS["open_rooms"][1]
    assert cfg.robots()[0].speed == 0.2 and len(cfg.robots()) == 3


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    bad = tmp_path / "b.cfg"
    bad.write_text("[partition]\nn_robots = 2\ncapabilities = 1,1,1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[sim]\nnormalization = cubic\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(None, {"map": "no_such_map"})


def test_output_dir_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert str(load_config().output_dir()) == "runs/latest"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert load_config().output_dir() == tmp_path / "env"
    assert load_config(None, {"out": str(tmp_path / "flag")}).output_dir() == tmp_path / "flag"


def test_gaussian_decay_field():
    cfg = load_config()
    cfg.decay = "gaussian"
    env = maps.builtin("two_rooms")
    _, d, _ = cfg.fields(env, seed=1)
    assert d[env.free].min() >= cfg.decay_min - 1e-12 and d[env.free].max() <= cfg.decay_max + 1e-12
    assert np.array_equal(d, cfg.fields(env, seed=1)[1])


# --- commands ---------------------------------------------------------------

def test_partition_from_pgm_file(tmp_path):
    out = tmp_path / "run"
    code = main(["partition", "--map", _pgm(tmp_path / "m.pgm"), "--robots", "2", "--seed", "1",
                 "--out", str(out)])
    assert code == EXIT_OK
    for name in ("partitions.pgm", "iterations.csv", "partition.json", "partitions.png"):
        assert (out / name).exists()
    info = json.loads((out / "partition.json").read_text())
    assert info["status"] == "converged" and info["spread"] < 5
    rows = list(csv.reader(open(out / "iterations.csv")))
    assert rows[0][:3] == ["iteration", "workload_0", "workload_1"] and len(rows) == info["iterations"] + 2


def test_nonconvergence_exit_code_keeps_artifacts(tmp_path):
    ini = tmp_path / "c.cfg"
    ini.write_text("[partition]\nmax_iterations = 1\nn_robots = 4\n")
    out = tmp_path / "run"
    assert main(["partition", "--map", "rooms", "--config", str(ini), "--out", str(out)]) == EXIT_NONCONVERGED
    assert (out / "partitions.pgm").exists() and (out / "iterations.csv").exists()


def test_voronoi_mode_matches_zero_weights(tmp_path):
    out = tmp_path / "run"
    assert main(["partition", "--map", "two_rooms", "--mode", "voronoi", "--robots", "3", "--seed", "2",
                 "--out", str(out)]) == EXIT_OK
    info = json.loads((out / "partition.json").read_text())
    assert info["weights"] == [0.0, 0.0, 0.0]
    env = maps.builtin("two_rooms")
    cfg = load_config(None, {"map": "two_rooms"})
    wm = compute_workload_map(env, *cfg.fields(env))
    d = voronoi_baseline(env, wm, np.array(info["generators"]))
    img = load_environment(out / "partitions.pgm", 0.1, threshold=1)
    assert np.array_equal(img.free, d.labels >= 0)
    assert d.workloads == pytest.approx(info["workloads"])


def test_simulate_snapshots_and_determinism(tmp_path, monkeypatch):
    args = ["simulate", "--map", "two_rooms", "--robots", "2", "--steps", "60", "--snapshot-every", "25",
            "--seed", "0"]
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "a"))
    assert main(args) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    assert sorted(p.name for p in (a / "snapshots").iterdir()) == ["0000.pgm", "0025.pgm", "0050.pgm"]
    assert len(list((a / "snapshots").iterdir())) == 60 // 25 + 1
    for name in ("summary.csv", "metrics.jsonl", "trace_0.csv", "graph_1.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for name in ("coverage.png", "paths.png", "partitions.png", "visits.pgm", "partition_errors.png"):
        assert (a / name).exists()


def test_simulate_tiny_room_is_fast(tmp_path):
    import time

    room = tmp_path / "room.txt"
    room.write_text("\n".join(["." * 12] * 10))
    t0 = time.perf_counter()
    assert main(["simulate", "--map", str(room), "--robots", "1", "--steps", "10", "--out",
                 str(tmp_path / "r")]) == EXIT_OK
    assert time.perf_counter() - t0 < 5.0


def test_graph_and_plan_commands(tmp_path):
    out = tmp_path / "g"
    assert main(["graph", "--map", "two_rooms", "--robots", "2", "--out", str(out)]) == EXIT_OK
    assert (out / "graph_0.csv").exists() and (out / "graphs.png").exists()
    out = tmp_path / "p"
    assert main(["plan", "--map", "two_rooms", "--robots", "2", "--out", str(out)]) == EXIT_OK
    recs = [json.loads(x) for x in (out / "plans.jsonl").read_text().splitlines()]
    assert len(recs) == 2 and all(r["relaxations"] <= r["bound"] for r in recs)
    assert (out / "plan_0.csv").read_text().startswith("index,vertex,x,y,expected_error")


def test_montecarlo_command(tmp_path):
    out = tmp_path / "mc"
    assert main(["montecarlo", "--map", "two_rooms", "--robots", "2", "--seeds", "3", "--out", str(out)]) == EXIT_OK
    text = (out / "montecarlo.csv").read_text()
    assert text.count(",W,") == 3 and text.count(",WG,") == 3
    assert (out / "montecarlo.png").exists()
    assert main(["montecarlo", "--map", "two_rooms", "--seeds", "1"]) == EXIT_USAGE


def test_bench_reports_bound(tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["bench", "--map", "rooms", "--robots", "2", "--iterations", "3", "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "bench.json").read_text())
    assert np.isfinite(rep["partition_step_s"]["mean"])
    assert all(p["relaxations"] <= p["bound"] for p in rep["planner"])
    assert max(p["vertices"] for p in rep["planner"]) >= 500
    again = json.loads(capsys.readouterr().out)
    assert [p["relaxations"] for p in again["planner"]] == [p["relaxations"] for p in rep["planner"]]


def test_usage_and_infeasible_codes(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["partition", "--mode", "nope"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    assert main(["partition", "--map", "no_such_map"]) == EXIT_USAGE
    assert main(["simulate", "--map", "two_rooms", "--steps", "0", "--out", str(tmp_path / "z")]) == EXIT_USAGE
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2 2\n255\n")
    assert main(["partition", "--map", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    corridor = tmp_path / "corridor.txt"
    corridor.write_text("#" * 20 + "\n" + "." * 20 + "\n" + "#" * 20)
    assert main(["simulate", "--map", str(corridor), "--robots", "1", "--steps", "5",
                 "--out", str(tmp_path / "c")]) == EXIT_INFEASIBLE
