"""Open coverage paths maximising accumulated error per visited vertex.

Edge weights depend only on the head vertex: the positive part of the
coverage error sampled at the cell containing it. The planner is a
label-correcting (Bellman-Ford style) search keeping, per vertex, the best
mean found so far and rejecting relaxations that would revisit a vertex of
the current predecessor chain. It is a heuristic for the best-mean simple
path; :func:`brute_force_plan` enumerates simple paths exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.sparse import csr_matrix

from .covgraph import SweepGraph
from .environment import Environment

BRUTE_FORCE_LIMIT = 14


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedGraph:
    graph: SweepGraph
    vertex_error: np.ndarray  # (n,) max(e, 0) at each vertex
    weights: np.ndarray  # (m,) per edge, equal to vertex_error[head]


@dataclass(frozen=True)
class Plan:
    vertices: tuple  # vertex indices, start first
    metric: float  # sum of edge weights / number of edges; -inf for no path
    k: int = 0
    relaxations: int = 0
    passes: int = 0

    @property
    def length(self) -> int:
        return max(len(self.vertices) - 1, 0)

    def points(self, graph: SweepGraph) -> np.ndarray:
        return graph.vertices[list(self.vertices)]


def sample_vertex_error(graph: SweepGraph, error: np.ndarray, env: Environment) -> np.ndarray:
    """Error at the cell containing each vertex (clipped into the grid)."""
    j = np.floor((graph.vertices[:, 0] - env.origin[0]) / env.resolution).astype(int)
    i = np.floor((graph.vertices[:, 1] - env.origin[1]) / env.resolution).astype(int)
    i = np.clip(i, 0, env.height - 1)
    j = np.clip(j, 0, env.width - 1)
    return np.asarray(error)[i, j]


def footprint_vertex_error(graph: SweepGraph, error: np.ndarray, env: Environment, robot) -> np.ndarray:
    """Production-weighted mean error over the coverage area centered at each vertex.

    This is the error a coverage action at the vertex would address; a lone
    cell under the vertex ignores the rim of the footprint, which the point
    rule never sees and which then stays chronically under-covered.
    """
    return footprint_operator(graph, env, robot) @ np.asarray(error, dtype=float).ravel()


def footprint_operator(graph: SweepGraph, env: Environment, robot) -> csr_matrix:
    """Sparse (vertices x cells) matrix of normalised production weights; row ``v`` averages over Omega(v)."""
    rows, cols, vals = [], [], []
    for v, p in enumerate(graph.vertices):
        ii, jj, alpha = robot.footprint(env, p)
        if ii.size:
            rows.append(np.full(ii.size, v))
            cols.append(ii * env.width + jj)
            vals.append(alpha / alpha.sum())
    if not rows:
        return csr_matrix((graph.n_vertices, env.free.size))
    return csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(graph.n_vertices, env.free.size))


def assign_weights(graph: SweepGraph, error: np.ndarray, env: Environment | None = None,
                   robot=None, operator: csr_matrix | None = None) -> WeightedGraph:
    """``omega(u, v) = max(e(v), 0)``.

    ``error`` is either a per-cell field (needs ``env``) or already per vertex.
    A per-cell field is read at the cell under each vertex, or averaged over
    the robot's footprint there when ``robot`` (or its precomputed
    ``operator``) is given.
    """
    error = np.asarray(error, dtype=float)
    if error.ndim == 2 and operator is not None:
        ev = operator @ error.ravel()
    elif error.ndim == 2:
        if env is None:
            raise ValueError("a per-cell error field needs the environment")
        ev = (sample_vertex_error(graph, error, env) if robot is None
              else footprint_vertex_error(graph, error, env, robot))
    else:
        ev = error
    ev = np.maximum(ev, 0.0)
    w = ev[graph.edges[:, 1]] if graph.n_edges else np.zeros(0)
    return WeightedGraph(graph, ev, w)


def path_metric(wgraph: WeightedGraph, vertices) -> float:
    vertices = list(vertices)
    if len(vertices) < 2:
        return -math.inf
    return float(sum(wgraph.vertex_error[v] for v in vertices[1:]) / (len(vertices) - 1))


def _better(mean, length, end_xy, b_mean, b_len, b_xy) -> bool:
    if mean != b_mean:
        return mean > b_mean
    if length != b_len:
        return length > b_len
    return tuple(end_xy) < tuple(b_xy)


@numba.njit(cache=True)
def _label_correcting(n, src, dst, w, start):
    s = np.zeros(n)
    ln = np.zeros(n, dtype=np.int64)
    pred = np.full(n, -1, dtype=np.int64)
    mean = np.full(n, -np.inf)
    labelled = np.zeros(n, dtype=np.bool_)
    labelled[start] = True
    relax = 0
    passes = 0
    m = src.shape[0]
    for _ in range(max(n - 1, 0)):
        passes += 1
        changed = False
        for e in range(m):
            u = src[e]
            if not labelled[u]:
                continue
            v = dst[e]
            relax += 1
            if v == start:
                continue
            cs = s[u] + w[e]
            cl = ln[u] + 1
            cm = cs / cl
            if not cm > mean[v]:
                continue
            # reject if v already lies on u's predecessor chain
            x = u
            cyc = False
            while x != -1:
                if x == v:
                    cyc = True
                    break
                x = pred[x]
            if cyc:
                continue
            s[v] = cs
            ln[v] = cl
            mean[v] = cm
            pred[v] = u
            labelled[v] = True
            changed = True
        if not changed:
            break
    return s, ln, pred, mean, relax, passes


def _chain(pred, v):
    out = []
    seen = set()
    while v != -1 and v not in seen:
        seen.add(v)
        out.append(int(v))
        v = pred[v]
    return out[::-1]


def plan_path(wgraph: WeightedGraph, start: int, k: int = 0) -> Plan:
    """Best-mean open path from ``start`` by label correction.

    Ties on the mean prefer the longer path, then the end vertex with the
    smallest coordinates. Later relaxations can rewrite predecessors of
    vertices already used by a stored label; each candidate end's chain is
    re-validated and its metric recomputed from the vertex list.
    """
    g = wgraph.graph
    n = g.n_vertices
    if n == 0:
        raise PlanningError("empty graph")
    if not 0 <= start < n:
        raise PlanningError("start vertex out of range")
    if g.n_edges == 0 or not np.any(g.edges[:, 0] == start):
        raise PlanningError("start vertex is isolated")
    src = np.ascontiguousarray(g.edges[:, 0], dtype=np.int64)
    dst = np.ascontiguousarray(g.edges[:, 1], dtype=np.int64)
    s, ln, pred, mean, relax, passes = _label_correcting(n, src, dst, np.asarray(wgraph.weights, float),
                                                        int(start))
    best = None
    for v in np.nonzero(np.isfinite(mean))[0]:
        path = _chain(pred, int(v))
        if path[0] != start or len(path) < 2:
            continue
        mval = path_metric(wgraph, path)
        cand = (mval, len(path) - 1, g.vertices[v])
        if best is None or _better(*cand, *best[0]):
            best = (cand, path)
    if best is None:
        return Plan((int(start),), -math.inf, k, int(relax), int(passes))
    return Plan(tuple(best[1]), best[0][0], k, int(relax), int(passes))


def brute_force_plan(wgraph: WeightedGraph, start: int, max_len: int | None = None, k: int = 0) -> Plan:
    """Exhaustive best-mean simple path from ``start`` under the same tie rules."""
    g = wgraph.graph
    n = g.n_vertices
    if n > BRUTE_FORCE_LIMIT and max_len is None:
        raise PlanningError(f"brute force limited to {BRUTE_FORCE_LIMIT} vertices without max_len")
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in g.edges:
        if int(v) not in adj[u]:
            adj[u].append(int(v))
    limit = n - 1 if max_len is None else max_len
    best = [None]

    def visit(path, total, on_path):
        u = path[-1]
        if len(path) > 1:
            m = total / (len(path) - 1)
            cand = (m, len(path) - 1, g.vertices[u])
            if best[0] is None or _better(*cand, *best[0][0]):
                best[0] = (cand, tuple(path))
        if len(path) - 1 >= limit:
            return
        for v in adj[u]:
            if v in on_path:
                continue
            on_path.add(v)
            path.append(v)
            visit(path, total + wgraph.vertex_error[v], on_path)
            path.pop()
            on_path.discard(v)

    visit([int(start)], 0.0, {int(start)})
    if best[0] is None:
        return Plan((int(start),), -math.inf, k)
    return Plan(best[0][1], path_metric(wgraph, best[0][1]), k)


@dataclass
class PlanCursor:
    """Execution state of a plan: index of the next vertex to reach."""

    plan: Plan | None = None
    next_index: int = 1

    def exhausted(self) -> bool:
        return self.plan is None or self.next_index >= len(self.plan.vertices)


def should_replan(cursor: PlanCursor) -> bool:
    """True iff the current plan has been fully executed (or there is none)."""
    return cursor.exhausted()


def export_plan_csv(plan: Plan, wgraph: WeightedGraph, path) -> None:
    """Waypoints ``index,vertex,x,y,expected_error``."""
    with open(Path(path), "w") as fh:
        fh.write("index,vertex,x,y,expected_error\n")
        for idx, v in enumerate(plan.vertices):
            x, y = wgraph.graph.vertices[v]
            fh.write(f"{idx},{v},{x:.6f},{y:.6f},{wgraph.vertex_error[v]:.6g}\n")


def plan_stats_record(plan: Plan, wgraph: WeightedGraph, runtime: float, robot: int = 0) -> dict:
    g = wgraph.graph
    return {"k": plan.k, "robot": robot, "vertices": g.n_vertices, "edges": g.n_edges,
            "length": plan.length, "metric": plan.metric if math.isfinite(plan.metric) else None,
            "relaxations": plan.relaxations, "passes": plan.passes,
            "bound": max(g.n_vertices - 1, 0) * g.n_edges, "runtime_s": runtime}


def timed_plan(wgraph: WeightedGraph, start: int, k: int = 0) -> tuple[Plan, float]:
    t0 = time.perf_counter()
    plan = plan_path(wgraph, start, k)
    return plan, time.perf_counter() - t0


def write_stats_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
