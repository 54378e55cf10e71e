"""``percov`` command line: partition, graph, plan, simulate, montecarlo, bench.

Exit codes: 0 success, 2 usage / bad inputs, 3 non-convergence, 4 infeasible geometry.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import covdyn, covgraph, planner, plotting, sim
from .config import OUT_ENV, ConfigError, RunConfig, load_config
from .environment import InfeasibleGeometryError, MapFormatError, write_pgm
from .geodesic import UnreachableError
from .partition import (PartitionContext, compute_workload_map, partition_stats, random_generators,
                        run_partitioning, step_W, step_WG)

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4

log = logging.getLogger("percov")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    over = {"map": args.map, "seed": args.seed, "mode": args.mode, "steps": args.steps,
            "snapshot_every": args.snapshot_every, "rho_max": args.rho_max, "out": args.out,
            "n_robots": args.robots}
    return load_config(args.config, over)


def write_iterations_csv(state, path) -> None:
    """One row per iteration: workload %, weight, |dH/dw| and f_sat of every robot."""
    n = len(state.workloads[0]) if state.workloads else 0
    head = ["iteration"]
    for name in ("workload", "weight", "grad_w", "fsat"):
        head += [f"{name}_{i}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for it, row in enumerate(zip(state.workloads, state.weights, state.grad_w, state.fsat)):
            w.writerow([it] + [f"{v:.8g}" for part in row for v in np.ravel(part)])


def _partition(cfg: RunConfig, out: Path, figures: bool = True):
    env = cfg.environment()
    phi, d, z = cfg.fields(env)
    wmap = compute_workload_map(env, phi, d, z)
    t0 = time.perf_counter()
    diagram, state = run_partitioning(env, wmap, cfg.partition)
    elapsed = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "partitions.pgm", sim.label_image(diagram.labels, diagram.n))
    write_iterations_csv(state, out / "iterations.csv")
    stats = partition_stats(diagram, wmap)
    with open(out / "partition.json", "w") as fh:
        json.dump({"status": state.status, "iterations": state.iterations, "seconds": elapsed,
                   "spread": diagram.spread(), "workloads": diagram.workloads.tolist(),
                   "weights": diagram.weights.tolist(), "generators": diagram.generators.tolist(),
                   "components": stats.components, "relative_workload": stats.relative_workload,
                   "degenerate_events": state.degenerate_events}, fh, indent=1)
    if figures:
        plotting.plot_partitions(env, diagram.labels, out / "partitions.png", diagram.generators,
                                 state.generator_paths, title=f"{cfg.partition.mode}: {state.status}")
        if state.iterations:
            plotting.plot_iterations(state, out / "iterations.png")
    log.info("partition %s after %d iterations, spread %.3f", state.status, state.iterations, diagram.spread())
    return env, (phi, d, z), wmap, diagram, state


def _unconverged(state) -> bool:
    return state.status == "max_iterations"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_partition(cfg: RunConfig) -> int:
    out = cfg.output_dir()
    _, _, _, diagram, state = _partition(cfg, out)
    print(f"{state.status} iterations={state.iterations} spread={diagram.spread():.3f} out={out}")
    return EXIT_NONCONVERGED if _unconverged(state) else EXIT_OK


def _graphs(cfg: RunConfig, env, diagram):
    return [covgraph.bridge_components(covgraph.build_graph(env, diagram.labels, i, r))
            for i, r in enumerate(cfg.robots(diagram.n))]


def cmd_graph(cfg: RunConfig) -> int:
    out = cfg.output_dir()
    env, _, _, diagram, state = _partition(cfg, out, figures=False)
    if _unconverged(state):
        return EXIT_NONCONVERGED
    graphs = _graphs(cfg, env, diagram)
    for i, g in enumerate(graphs):
        covgraph.export_graph_csv(g, out / f"graph_{i}.csv")
    plotting.plot_partitions(env, diagram.labels, out / "graphs.png", diagram.generators, graphs=graphs)
    print(" ".join(f"graph_{i}: |V|={g.n_vertices} |E|={g.n_edges}" for i, g in enumerate(graphs)))
    return EXIT_OK


def cmd_plan(cfg: RunConfig) -> int:
    """One plan per robot on the initial (uncovered) error field, from the vertex nearest its generator."""
    out = cfg.output_dir()
    env, (phi, d, z), _, diagram, state = _partition(cfg, out, figures=False)
    if _unconverged(state):
        return EXIT_NONCONVERGED
    graphs = _graphs(cfg, env, diagram)
    fld = covdyn.CoverageField(env, z, phi, d)
    error = covdyn.coverage_error(fld)
    stats, plans = [], []
    for i, (g, robot) in enumerate(zip(graphs, cfg.robots(diagram.n))):
        covgraph.export_graph_csv(g, out / f"graph_{i}.csv")
        wg = planner.assign_weights(g, error, env, robot if cfg.vertex_error == "footprint" else None)
        plan, dt = planner.timed_plan(wg, g.nearest_vertex(diagram.generators[i]))
        planner.export_plan_csv(plan, wg, out / f"plan_{i}.csv")
        stats.append(planner.plan_stats_record(plan, wg, dt, i))
        plans.append(plan.points(g))
    planner.write_stats_jsonl(out / "plans.jsonl", stats)
    plotting.plot_paths(env, plans, out / "plans.png", diagram.labels)
    print(" ".join(f"plan_{i}: L={s['length']} metric={s['metric']}" for i, s in enumerate(stats)))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    out = cfg.output_dir()
    env, (phi, d, z), _, diagram, state = _partition(cfg, out)
    if _unconverged(state):
        return EXIT_NONCONVERGED
    sc = sim.SimConfig(env, cfg.robots(diagram.n), cfg.partition, steps=cfg.steps,
                       snapshot_every=cfg.snapshot_every, normalization=cfg.normalization, phi=phi, decay=d,
                       zstar=z, diagram=diagram, vertex_error=cfg.vertex_error)
    trace = sim.run(sc)
    sim.write_trace(trace, out)
    plotting.plot_coverage(trace.records, out / "coverage.png", covdyn.objective_means(trace.field))
    plotting.plot_partition_errors(trace.records, out / "partition_errors.png")
    plotting.plot_field(env, covdyn.normalized_error(trace.field, cfg.normalization), out / "error.png",
                        "final normalised error", cmap="coolwarm", vmin=-0.5, vmax=0.5)
    plotting.plot_field(env, trace.visits, out / "visits.png", "visits")
    plotting.plot_paths(env, trace.paths, out / "paths.png", diagram.labels)
    last = trace.records[-1]
    print(f"k={last.k} mean_err={last.mean_err:.5f} std_err={last.std_err:.5f} mean_cov={last.mean_cov:.3f}")
    return EXIT_OK


def cmd_montecarlo(cfg: RunConfig, modes) -> int:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    env = cfg.environment()
    rows = []
    for mode in modes:
        base = replace(cfg.partition, mode=mode)
        for seed in cfg.seeds:
            phi, d, z = cfg.fields(env, seed)
            wmap = compute_workload_map(env, phi, d, z)
            rows += sim.monte_carlo_rows(env, wmap, replace(base, seed=seed))
    sim.write_monte_carlo_csv(rows, out / "montecarlo.csv")
    plotting.plot_monte_carlo(rows, out / "montecarlo.png")
    for mode in sorted({r.mode for r in rows}):
        sel = [r for r in rows if r.mode == mode]
        print(f"{mode}: disconnected={sum(r.disconnected for r in sel)} "
              f"mean_relative_workload={np.mean([x for r in sel for x in r.relative_workload]):.2f}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, iterations: int = 20) -> int:
    """Per-iteration partition step time and per-plan planner time, as JSON."""
    env = cfg.environment()
    phi, d, z = cfg.fields(env)
    wmap = compute_workload_map(env, phi, d, z)
    pc = cfg.partition
    gens = random_generators(env, pc.n_robots, pc.seed, pc.robot_radius)
    ctx = PartitionContext.create(env, wmap, gens, capabilities=pc.capabilities)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        if pc.mode == "WG":
            step_WG(ctx, pc.schedule, pc.k_g, pc.k_sat, pc.dt)
        else:
            step_W(ctx, pc.schedule, pc.dt)
        times.append(time.perf_counter() - t0)
    diagram = ctx.diagram
    fld = covdyn.CoverageField(env, z, phi, d)
    error = covdyn.coverage_error(fld)
    plans = []
    for i, robot in enumerate(cfg.robots(diagram.n)):
        try:
            g = covgraph.build_graph(env, diagram.labels, i, robot)
        except InfeasibleGeometryError:
            continue
        wg = planner.assign_weights(g, error, env)
        plan, dt = planner.timed_plan(wg, g.nearest_vertex(diagram.generators[i]))
        plans.append(planner.plan_stats_record(plan, wg, dt, i))
    report = {"map": env.name, "cells": int(env.free.size), "robots": diagram.n, "mode": pc.mode,
              "partition_step_s": {"mean": float(np.mean(times)), "min": float(np.min(times)),
                                   "max": float(np.max(times)), "iterations": iterations},
              "partition_step_per_robot_s": float(np.mean(times)) / diagram.n,
              "planner": plans}
    text = json.dumps(report, indent=1)
    print(text)
    if cfg.out or os.environ.get(OUT_ENV):
        out = cfg.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--map", help="built-in map name or PGM/ASCII map file")
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--out", help="output directory (default: $PERCOV_OUT or runs/latest)")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["w", "wg", "voronoi", "W", "WG"])
    common.add_argument("--robots", type=int, help="number of robots")
    common.add_argument("--steps", type=int)
    common.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    common.add_argument("--rho-max", type=float, dest="rho_max")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="percov", description="Equitable partitioning and persistent coverage.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("partition", "equitable partition; label PGM and iteration CSV"),
                        ("graph", "partition, then sweep graphs per robot"),
                        ("plan", "one plan per robot on the uncovered field"),
                        ("simulate", "full persistent coverage run"),
                        ("montecarlo", "partition statistics over seeds (both laws unless --mode)"),
                        ("bench", "timing report as JSON")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "montecarlo":
            sp.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
        if name == "bench":
            sp.add_argument("--iterations", type=int, default=20)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "graph":
            return cmd_graph(cfg)
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "simulate":
            if cfg.steps < 1:
                raise UsageError("--steps must be at least 1")
            return cmd_simulate(cfg)
        if args.command == "montecarlo":
            if args.seeds is not None:
                cfg.seeds = tuple(range(args.seeds))
            if len(cfg.seeds) < 2:
                raise UsageError("at least two seeds required")
            modes = [cfg.partition.mode] if args.mode else ["W", "WG"]
            return cmd_montecarlo(cfg, modes)
        return cmd_bench(cfg, args.iterations)
    except (ConfigError, MapFormatError, UsageError, FileNotFoundError, KeyError) as exc:
        print(f"percov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleGeometryError, UnreachableError) as exc:
        print(f"percov: infeasible geometry: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"percov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
