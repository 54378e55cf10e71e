"""Closed-loop persistent coverage: partition, build graphs, then plan -> move -> cover -> decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import covdyn, covgraph, planner
from .covdyn import CoverageField, RobotModel
from .environment import Environment, InfeasibleGeometryError, erode_free_space, write_pgm
from .geodesic import UnreachableError, geodesic_field, string_pull
from .partition import (PartitionConfig, PowerDiagram, WorkloadMap, compute_workload_map, gaussian_decay,
                        linear_fields, partition_stats, random_generators, run_partitioning)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    env: Environment
    robots: tuple  # RobotModel per robot
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    steps: int = 5000
    snapshot_every: int = 0  # 0 disables snapshots
    normalization: str = "objective"
    phi: np.ndarray | None = None  # default: the linear importance / objective fields
    decay: np.ndarray | float | None = None
    zstar: np.ndarray | None = None
    diagram: PowerDiagram | None = None  # frozen partition; computed when absent
    starts: np.ndarray | None = None  # robot start positions; default: initial generators
    vertex_error: str = "footprint"  # "footprint" (mean over the coverage area) or "point"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be non-negative")
        if self.vertex_error not in ("footprint", "point"):
            raise ValueError("vertex_error must be 'footprint' or 'point'")

    def fields(self):
        phi, d, z = linear_fields(self.env)
        phi = phi if self.phi is None else self.phi
        d = d if self.decay is None else np.broadcast_to(np.asarray(self.decay, float), self.env.free.shape)
        z = z if self.zstar is None else self.zstar
        return phi, d, z


def default_robots(n: int, rho_max: float = 20.0, **kw) -> tuple:
    return tuple(RobotModel(id=i, rho_max=rho_max, **kw) for i in range(n))


@dataclass
class RobotState:
    position: np.ndarray
    route: list  # remaining world points to visit, in order
    route_vertices: list  # graph vertex per route point (-1 for transit points)
    vertex: int = -1  # graph vertex the robot currently sits on (-1 while transiting)
    plan: planner.Plan | None = None
    outside: bool = False


@dataclass
class SimTrace:
    records: list  # covdyn.Metrics per step, k = 0..K
    snapshots: list  # (k, gray image)
    paths: list  # per robot (K+1, 2) positions
    rhos: list  # per robot (K,) gains
    visits: np.ndarray
    diagram: PowerDiagram
    graphs: list
    plan_stats: list
    flags: list  # per robot notes (e.g. started outside its partition)
    additivity_gap: float  # worst relative |f - sum f_i|
    field: CoverageField = None

    @property
    def steps(self) -> int:
        return len(self.records) - 1

    def tail(self, fraction: float = 0.25) -> tuple[float, float, float]:
        """Mean error, mean error std, mean coverage over the final ``fraction`` of steps."""
        recs = self.records[1:]
        n = max(1, int(round(len(recs) * fraction)))
        sel = recs[-n:]
        return (float(np.mean([r.mean_err for r in sel])), float(np.mean([r.std_err for r in sel])),
                float(np.mean([r.mean_cov for r in sel])))


def _advance(state: RobotState, distance: float) -> None:
    """Move along the route by ``distance``, passing intermediate points."""
    left = distance
    while state.route and left > 1e-12:
        target = state.route[0]
        gap = float(np.linalg.norm(target - state.position))
        if gap <= left + 1e-12:
            state.position = target.copy()
            state.vertex = state.route_vertices[0]
            state.route.pop(0)
            state.route_vertices.pop(0)
            left -= gap
        else:
            state.position = state.position + (target - state.position) * (left / gap)
            state.vertex = -1
            left = 0.0


def snapshot(fld: CoverageField, positions=(), plans=(), normalization: str = "objective") -> np.ndarray:
    """Gray rendering of the normalised error: walls black, robots white, plan polylines dark.

    Error is mapped from [-1, 1] (of its normalised value) to gray [32, 224].
    """
    env = fld.env
    eps = covdyn.normalized_error(fld, normalization)
    if normalization == "squared":
        eps = eps * fld.zstar
    gray = np.where(env.free, 128 + 96 * np.clip(eps, -1, 1), 0).astype(np.uint8)
    for pts in plans:
        pts = np.asarray(pts, float)
        for a, b in zip(pts[:-1], pts[1:]):
            n = max(2, int(np.ceil(np.linalg.norm(b - a) / (0.5 * env.resolution))) + 1)
            for t in np.linspace(0, 1, n):
                i, j = env.cell_of(a + t * (b - a))
                if env.in_bounds((i, j)):
                    gray[i, j] = 16
    for p in positions:
        i, j = env.cell_of(p)
        gray[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2] = 255
    return gray


def _transit(env: Environment, start, target, body_radius: float = 0.0) -> list[np.ndarray]:
    """Polyline from ``start`` to ``target`` (exclusive of ``start``) through free space.

    Uses the space eroded by the robot body when both ends lie in it.
    """
    if body_radius > 0:
        eroded = Environment(erode_free_space(env, body_radius), env.resolution, env.origin, env.name)
        try:
            chain = string_pull(geodesic_field(eroded, target), start)
            return [np.asarray(p, float) for p in chain[1:]]
        except (UnreachableError, ValueError):
            pass
    chain = string_pull(geodesic_field(env, target), start)
    return [np.asarray(p, float) for p in chain[1:]]


def _route(plan_vertices, g: covgraph.SweepGraph, env: Environment, robot: RobotModel, cache: dict):
    """Waypoints and their vertex ids for a plan; transit edges expand to free-space polylines."""
    pts, ids = [], []
    for u, v in zip(plan_vertices[:-1], plan_vertices[1:]):
        if (u, v) in cache:
            seg = cache[(u, v)]
            pts += [p.copy() for p in seg]
            ids += [-1] * (len(seg) - 1) + [v]
            continue
        pts.append(g.vertices[v].copy())
        ids.append(v)
    return pts, ids


def run(config: SimConfig) -> SimTrace:
    """Run the coverage loop for ``config.steps`` steps; deterministic given the config."""
    env = config.env
    robots = list(config.robots)
    n = len(robots)
    phi, d, z = config.fields()
    diagram = config.diagram
    if diagram is None and n > 0:
        wmap = compute_workload_map(env, phi, d, z)
        pcfg = replace(config.partition, n_robots=n)
        diagram, _ = run_partitioning(env, wmap, pcfg)
    labels = diagram.labels if diagram is not None else -np.ones(env.free.shape, dtype=int)
    starts = (np.asarray(config.starts, float).reshape(-1, 2) if config.starts is not None
              else (diagram.generators if diagram is not None else np.zeros((0, 2))))
    if len(starts) != n:
        raise ValueError("one start position per robot required")

    fld = CoverageField(env, z, phi, d)
    graphs, states, flags, transits, operators = [], [], [], [], []
    for i, robot in enumerate(robots):
        g = covgraph.build_graph(env, labels, i, robot)
        g = covgraph.bridge_components(g)
        graphs.append(g)
        legs = {}
        for (u, v), c in zip(g.edges, g.edge_class):
            if c == covgraph.TRANSIT:
                legs[(int(u), int(v))] = _transit(env, g.vertices[u], g.vertices[v], robot.body_radius)
        transits.append(legs)
        operators.append(planner.footprint_operator(g, env, robot) if config.vertex_error == "footprint" else None)
        p = starts[i].copy()
        st = RobotState(p, [], [])
        target = g.nearest_vertex(p)
        inside = bool(labels[env.cell_of(p)] == i) if env.in_bounds(env.cell_of(p)) else False
        st.outside = not inside
        flags.append("start outside partition" if not inside else "")
        if np.linalg.norm(g.vertices[target] - p) > 1e-9:
            try:
                route = _transit(env, p, g.vertices[target], robot.body_radius)
            except UnreachableError:
                raise InfeasibleGeometryError(f"robot {i} cannot reach its graph") from None
            st.route = route
            st.route_vertices = [-1] * (len(route) - 1) + [target]
        else:
            st.vertex = target
        states.append(st)

    records = [covdyn.metrics(fld, labels, n, config.normalization)]
    snaps = []
    if config.snapshot_every:
        snaps.append((0, snapshot(fld, [s.position for s in states], (), config.normalization)))
    paths = [[s.position.copy()] for s in states]
    rhos: list[list[float]] = [[] for _ in range(n)]
    plan_stats = []
    worst_gap = 0.0

    for k in range(1, config.steps + 1):
        error = covdyn.coverage_error(fld)
        for i, (robot, st, g) in enumerate(zip(robots, states, graphs)):
            if not st.route and st.vertex >= 0:
                wg = planner.assign_weights(g, error, env, operator=operators[i])
                try:
                    plan, dt = planner.timed_plan(wg, st.vertex, k)
                except planner.PlanningError:
                    plan, dt = None, 0.0  # isolated vertex: the robot holds position
                if plan is not None and plan.length > 0:
                    st.plan = plan
                    st.route, st.route_vertices = _route(plan.vertices, g, env, robot, transits[i])
                    plan_stats.append(planner.plan_stats_record(plan, wg, dt, i))
            _advance(st, robot.speed)
            paths[i].append(st.position.copy())
        actions = []
        for i, (robot, st) in enumerate(zip(robots, states)):
            rho = covdyn.compute_rho(robot, st.position, fld)
            rhos[i].append(rho)
            actions.append((robot, st.position, rho))
        covdyn.apply_actions(fld, actions)
        f, parts = covdyn.quadratic_error(fld, labels, n)
        unlabeled = covdyn.coverage_error(fld)[env.free & (labels < 0)]
        f_rest = float((unlabeled**2).sum() * env.cell_area)
        if f > 0:
            worst_gap = max(worst_gap, abs(f - sum(parts) - f_rest) / f)
        records.append(covdyn.metrics(fld, labels, n, config.normalization))
        if config.snapshot_every and k % config.snapshot_every == 0:
            plans = [[st.position] + list(st.route) for st in states]
            snaps.append((k, snapshot(fld, [s.position for s in states], plans, config.normalization)))

    return SimTrace(records, snaps, [np.array(p) for p in paths], [np.array(r) for r in rhos],
                    fld.visits.copy(), diagram, graphs, plan_stats, flags, worst_gap, fld)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def label_image(labels: np.ndarray, n: int) -> np.ndarray:
    """One gray level per robot (evenly spread in [40, 255]), obstacles 0."""
    levels = np.linspace(40, 255, max(n, 1)).round().astype(np.uint8)
    out = np.zeros(labels.shape, dtype=np.uint8)
    ok = labels >= 0
    out[ok] = levels[labels[ok]]
    return out


def write_trace(trace: SimTrace, out_dir) -> None:
    """metrics.jsonl, partitions.pgm, graph_i.csv, trace_i.csv, snapshots/NNNN.pgm, summary.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    covdyn.write_metrics_jsonl(out / "metrics.jsonl", trace.records)
    n = len(trace.graphs)
    write_pgm(out / "partitions.pgm", label_image(trace.diagram.labels, n)) if trace.diagram is not None else None
    for i, g in enumerate(trace.graphs):
        covgraph.export_graph_csv(g, out / f"graph_{i}.csv")
        with open(out / f"trace_{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "x", "y", "rho"])
            for k, p in enumerate(trace.paths[i]):
                rho = trace.rhos[i][k - 1] if k > 0 else 0.0
                w.writerow([k, f"{p[0]:.6f}", f"{p[1]:.6f}", f"{rho:.6g}"])
    if trace.snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for k, img in trace.snapshots:
            write_pgm(snap_dir / f"{k:04d}.pgm", img)
    write_pgm(out / "visits.pgm", np.round(255 * trace.visits / max(trace.visits.max(), 1)).astype(np.uint8))
    planner.write_stats_jsonl(out / "plans.jsonl", trace.plan_stats)
    mean_err, std_err, mean_cov = trace.tail()
    zmean, zphi = covdyn.objective_means(trace.field)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["steps", "final_mean_err", "final_std_err", "tail_mean_err", "tail_std_err",
                    "tail_mean_cov", "mean_objective", "mean_weighted_objective", "additivity_gap", "plans"])
        last = trace.records[-1]
        w.writerow([trace.steps, f"{last.mean_err:.6g}", f"{last.std_err:.6g}", f"{mean_err:.6g}",
                    f"{std_err:.6g}", f"{mean_cov:.6g}", f"{zmean:.6g}", f"{zphi:.6g}",
                    f"{trace.additivity_gap:.3g}", len(trace.plan_stats)])


# ---------------------------------------------------------------------------
# Monte Carlo over partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloRow:
    seed: int
    mode: str
    status: str
    iterations: int
    spread: float
    disconnected: int
    relative_workload: tuple  # per partition, percent


def monte_carlo_partitions(env: Environment, n: int, seeds, mode: str, base: PartitionConfig | None = None,
                           decay: str = "uniform") -> list[MonteCarloRow]:
    """Partition the map once per seed and collect connectivity statistics.

    ``decay="gaussian"`` draws a random peak location per seed (seeded), the
    way the workload was varied across trials; ``"uniform"`` keeps the
    constant decay of the linear fields.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("at least two seeds required")
    base = base or PartitionConfig()
    rows = []
    for seed in seeds:
        phi, d, z = linear_fields(env)
        if decay == "gaussian":
            rng = np.random.default_rng(10_000 + seed)
            center = random_generators(env, 1, int(rng.integers(1 << 31)), min_separation=0.0)[0]
            d = gaussian_decay(env, center)
        elif decay != "uniform":
            raise ValueError("decay must be 'uniform' or 'gaussian'")
        wmap = compute_workload_map(env, phi, d, z)
        rows += monte_carlo_rows(env, wmap, replace(base, mode=mode, n_robots=n, seed=seed))
    return rows


def monte_carlo_rows(env: Environment, wmap: WorkloadMap, config: PartitionConfig) -> list[MonteCarloRow]:
    """Single-seed partition run reduced to a statistics row."""
    diagram, state = run_partitioning(env, wmap, config)
    stats = partition_stats(diagram, wmap)
    return [MonteCarloRow(config.seed, config.mode, state.status, state.iterations, diagram.spread(),
                          stats.disconnected, tuple(stats.relative_workload))]


def five_numbers(values) -> tuple:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return (math.nan,) * 5
    return tuple(float(x) for x in np.percentile(v, [0, 25, 50, 75, 100]))


def write_monte_carlo_csv(rows: list[MonteCarloRow], path) -> None:
    """Per-seed rows then a five-number summary of the relative workloads per mode."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "mode", "status", "iterations", "spread", "disconnected", "mean_relative_workload",
                    "min_relative_workload"])
        for r in rows:
            w.writerow([r.seed, r.mode, r.status, r.iterations, f"{r.spread:.4f}", r.disconnected,
                        f"{np.mean(r.relative_workload):.4f}", f"{np.min(r.relative_workload):.4f}"])
        w.writerow([])
        w.writerow(["mode", "total_disconnected", "min", "q1", "median", "q3", "max"])
        for mode in sorted({r.mode for r in rows}):
            sel = [r for r in rows if r.mode == mode]
            rel = [x for r in sel for x in r.relative_workload]
            w.writerow([mode, sum(r.disconnected for r in sel), *(f"{x:.4f}" for x in five_numbers(rel))])
