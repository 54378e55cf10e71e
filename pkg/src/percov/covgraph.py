"""Sweep graphs over robot partitions.

Each graph joins an axis-aligned lattice of spacing ``d`` (the sweep lines)
with a ring of vertices along the partition boundary, plus short axis-aligned
links between the two. Partitions are treated as closed unions of their
cells, so boundary vertices sit on cell edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .covdyn import RobotModel
from .environment import Environment, InfeasibleGeometryError, erode_free_space

GRID, BOUNDARY = 0, 1
EDGE_CLASSES = ("g", "b", "gb", "t")  # grid, boundary, grid-boundary, transit
TRANSIT = 3


# ---------------------------------------------------------------------------
# sweep spacing
# ---------------------------------------------------------------------------

def spacing_objective(robot: RobotModel, step: float | None = None):
    """Sampled sweep-overlap objective ``J(d)`` on the multiples of ``step``.

    For two footprints a distance ``d`` apart, ``J`` is the squared deviation
    of their summed production from its mean over the enclosing rectangle
    ``[-r, r] x [-r, d + r]``. Expanding the square,
    ``J(d) = 2 int(a^2) + 2 C(d) - (2 int a)^2 / A(d)`` where ``C`` is the
    footprint autocorrelation along the sweep axis, sampled here with a
    midpoint rule. Returns ``(d_values, J_values)`` for ``d`` in ``(0, 2r]``.
    """
    r = robot.coverage_radius
    step = r / 200.0 if step is None else step
    m = int(np.ceil(r / step))
    offs = (np.arange(-m, m) + 0.5) * step
    x, y = np.meshgrid(offs, offs)
    alpha = np.asarray(robot.production(np.hypot(x, y)), dtype=float)
    alpha = np.where(np.hypot(x, y) <= r, alpha, 0.0)
    area = step * step
    mass = alpha.sum() * area
    if mass <= 0:
        raise ValueError("footprint produces no coverage")
    sq = (alpha**2).sum() * area
    n_shift = int(np.floor(2 * r / step + 1e-9))
    shifts = np.arange(1, n_shift + 1)
    corr = np.array([(alpha[k:, :] * alpha[:-k, :]).sum() * area if k < alpha.shape[0] else 0.0
                     for k in shifts])
    d = shifts * step
    rect = 2 * r * (d + 2 * r)
    return d, 2 * sq + 2 * corr - (2 * mass) ** 2 / rect


def optimal_spacing(robot: RobotModel, step: float | None = None, bounds: tuple | None = None) -> float:
    """Sweep-line spacing minimising the overlap objective over ``(0, 2 r]``.

    Exhaustive over the sample multiples (the objective is cheap and can have
    plateaus for flat-topped footprints), followed by a parabolic refinement
    through the best sample and its neighbours.
    """
    r = robot.coverage_radius
    lo, hi = (0.0, 2 * r) if bounds is None else bounds
    if hi <= lo:
        return float(hi)
    d, J = spacing_objective(robot, step)
    keep = (d > lo) & (d <= hi + 1e-12)
    if not keep.any():
        return float(hi)
    d, J = d[keep], J[keep]
    k = int(np.argmin(J))
    if 0 < k < len(d) - 1:
        j0, j1, j2 = J[k - 1], J[k], J[k + 1]
        curv = j0 - 2 * j1 + j2
        if curv > 0:
            shift = 0.5 * (j0 - j2) / curv
            return float(d[k] + shift * (d[1] - d[0]))
    return float(d[k])


# ---------------------------------------------------------------------------
# region geometry helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Closed union of the cells of ``mask`` on the environment grid."""

    env: Environment
    mask: np.ndarray

    def contains(self, points, tol: float = 1e-7) -> np.ndarray:
        """Whether each point lies in a (closed) cell of the mask."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        env = self.env
        out = np.zeros(len(pts), dtype=bool)
        for dx in (-tol, tol):
            for dy in (-tol, tol):
                j = np.floor((pts[:, 0] + dx - env.origin[0]) / env.resolution).astype(int)
                i = np.floor((pts[:, 1] + dy - env.origin[1]) / env.resolution).astype(int)
                ok = (i >= 0) & (i < env.height) & (j >= 0) & (j < env.width)
                hit = np.zeros(len(pts), dtype=bool)
                hit[ok] = self.mask[i[ok], j[ok]]
                out |= hit
        return out

    def segment_inside(self, a, b) -> bool:
        """Sampled check that the straight segment stays inside the region."""
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / (0.25 * self.env.resolution))) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        return bool(self.contains(a + t * (b - a)).all())


def anchor_point(env: Environment, mask: np.ndarray) -> np.ndarray:
    """Center of the left-most, then bottom-most, cell of ``mask``."""
    ii, jj = np.nonzero(mask)
    if ii.size == 0:
        raise InfeasibleGeometryError("empty partition")
    j = jj.min()
    i = ii[jj == j].min()
    return env.center_of((int(i), int(j)))


def boundary_loops(env: Environment, mask: np.ndarray) -> list[np.ndarray]:
    """Closed boundary polylines (cell edges) of ``mask`` in world coordinates.

    Each loop keeps the region on its left and lists only its corner points;
    the first point is not repeated at the end. Cells touching only at a
    corner are kept in separate loops (a robot cannot pass the pinch).
    """
    h, w = mask.shape
    m = np.pad(mask, 1, constant_values=False)
    nxt: dict = {}
    # directed unit edges between grid vertices (x, y) in cell units, region on the left
    for i in range(h):
        for j in range(w):
            if not m[i + 1, j + 1]:
                continue
            if not m[i, j + 1]:  # below is outside: edge along the bottom, eastward
                nxt.setdefault((j, i), []).append((j + 1, i))
            if not m[i + 2, j + 1]:  # top, westward
                nxt.setdefault((j + 1, i + 1), []).append((j, i + 1))
            if not m[i + 1, j]:  # left, southward
                nxt.setdefault((j, i + 1), []).append((j, i))
            if not m[i + 1, j + 2]:  # right, northward
                nxt.setdefault((j + 1, i), []).append((j + 1, i + 1))
    loops = []
    used: set = set()

    def turn_rank(din, dout):
        # prefer the sharpest left turn so diagonal pinches split the loops
        cross = din[0] * dout[1] - din[1] * dout[0]
        dot = din[0] * dout[0] + din[1] * dout[1]
        return -(cross * 2 + dot)

    for start in sorted(nxt):
        for first in sorted(nxt[start]):
            if (start, first) in used:
                continue
            loop = [start]
            prev, cur = start, first
            used.add((start, first))
            while cur != start:
                loop.append(cur)
                din = (cur[0] - prev[0], cur[1] - prev[1])
                options = [o for o in nxt[cur] if (cur, o) not in used]
                if not options:
                    break
                options.sort(key=lambda o: turn_rank(din, (o[0] - cur[0], o[1] - cur[1])))
                prev, cur = cur, options[0]
                used.add((prev, cur))
            pts = np.array(loop, dtype=float)
            # drop collinear interior points
            keep = []
            n = len(pts)
            for k in range(n):
                a, b, c = pts[k - 1], pts[k], pts[(k + 1) % n]
                if abs((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])) > 0:
                    keep.append(k)
            pts = pts[keep]
            world = np.column_stack([env.origin[0] + pts[:, 0] * env.resolution,
                                     env.origin[1] + pts[:, 1] * env.resolution])
            loops.append(world)
    return loops


# ---------------------------------------------------------------------------
# graph parts
# ---------------------------------------------------------------------------

def build_grid_part(env: Environment, mask: np.ndarray, spacing: float, anchor=None):
    """Lattice vertices ``(x0 + k d, y0 + l d)`` inside the region and their 4-neighbour edges.

    Returns ``(vertices (n, 2), edges (m, 2) index pairs, both directions)``.
    Edges whose straight segment leaves the region are dropped.
    """
    region = Region(env, mask)
    v0 = anchor_point(env, mask) if anchor is None else np.asarray(anchor, float)
    width, height = env.extent
    kx = np.arange(0, int(np.floor((env.origin[0] + width - v0[0]) / spacing)) + 1)
    ly_lo = -int(np.floor((v0[1] - env.origin[1]) / spacing))
    ly_hi = int(np.floor((env.origin[1] + height - v0[1]) / spacing))
    ly = np.arange(ly_lo, ly_hi + 1)
    K, L = np.meshgrid(kx, ly, indexing="ij")
    pts = np.column_stack([v0[0] + K.ravel() * spacing, v0[1] + L.ravel() * spacing])
    inside = region.contains(pts)
    keys = np.column_stack([K.ravel(), L.ravel()])[inside]
    verts = pts[inside]
    index = {(int(a), int(b)): n for n, (a, b) in enumerate(keys)}
    edges = []
    for (a, b), u in index.items():
        for da, db in ((1, 0), (0, 1)):
            v = index.get((a + da, b + db))
            if v is not None and region.segment_inside(verts[u], verts[v]):
                edges.append((u, v))
                edges.append((v, u))
    return verts, np.array(edges, dtype=np.int64).reshape(-1, 2)


def _crossings(a, b, lines, axis) -> list[tuple[float, np.ndarray]]:
    """Points where segment ``a -> b`` meets lines ``coord[axis] = value``, with their parameter."""
    lo, hi = sorted((a[axis], b[axis]))
    if hi - lo < 1e-12:
        return []  # segment runs along the line family: no isolated crossing
    out = []
    for v in lines[(lines >= lo - 1e-12) & (lines <= hi + 1e-12)]:
        t = (v - a[axis]) / (b[axis] - a[axis])
        p = a + t * (b - a)
        p[axis] = v
        out.append((float(t), p))
    return out


def _boundary_vertices(walk, region: "Region") -> list[np.ndarray]:
    """Crossing points of a loop walk, plus the corners needed to keep chords inside the region."""
    pts: list[np.ndarray] = []

    def push(p):
        if not pts or np.linalg.norm(p - pts[-1]) > 1e-9:
            pts.append(p)

    idx = [k for k, (_, crossing) in enumerate(walk) if crossing]
    if not idx:
        return []
    m = len(walk)
    for a, b in zip(idx, idx[1:] + [idx[0] + m]):
        push(walk[a][0])
        if not region.segment_inside(walk[a][0], walk[b % m][0]):
            for k in range(a + 1, b):
                push(walk[k % m][0])
    if len(pts) > 1 and np.linalg.norm(pts[0] - pts[-1]) <= 1e-9:
        pts.pop()
    return pts


def build_boundary_part(env: Environment, mask: np.ndarray, spacing: float, anchor=None):
    """Vertices where the boundary loops cross the half-spacing grid lines through the anchor.

    Returns ``(vertices, edges, loop_ids)``; consecutive vertices along a loop
    are joined in both directions. Where the chord between two consecutive
    crossings would cut across a concave corner, the loop corners in between
    are kept as extra vertices so every edge stays inside the partition. A
    loop with no crossing contributes its first corner as a lone vertex.
    """
    v0 = anchor_point(env, mask) if anchor is None else np.asarray(anchor, float)
    half = 0.5 * spacing
    width, height = env.extent
    xs = v0[0] + half * np.arange(int(np.floor((env.origin[0] - v0[0]) / half)) - 1,
                                  int(np.ceil((env.origin[0] + width - v0[0]) / half)) + 2)
    ys = v0[1] + half * np.arange(int(np.floor((env.origin[1] - v0[1]) / half)) - 1,
                                  int(np.ceil((env.origin[1] + height - v0[1]) / half)) + 2)
    region = Region(env, mask)
    verts, edges, loop_ids = [], [], []
    for lid, loop in enumerate(boundary_loops(env, mask)):
        # walk the loop keeping crossings (True) and corners (False) in order
        walk: list[tuple[np.ndarray, bool]] = []
        n = len(loop)
        for k in range(n):
            a, b = loop[k], loop[(k + 1) % n]
            walk.append((a.copy(), False))
            hits = _crossings(a, b, xs, 0) + _crossings(a, b, ys, 1)
            for _, p in sorted(hits, key=lambda h: h[0]):
                walk.append((p, True))
        pts = _boundary_vertices(walk, region)
        if not pts:
            pts = [loop[0].copy()]
        base = len(verts)
        verts.extend(pts)
        loop_ids.extend([lid] * len(pts))
        m = len(pts)
        if m == 2:
            edges += [(base, base + 1), (base + 1, base)]
        elif m > 2:
            for k in range(m):
                u, v = base + k, base + (k + 1) % m
                edges += [(u, v), (v, u)]
    return (np.array(verts, dtype=float).reshape(-1, 2), np.array(edges, dtype=np.int64).reshape(-1, 2),
            np.array(loop_ids, dtype=np.int64))


def merge_parts(env: Environment, mask: np.ndarray, grid_v: np.ndarray, bound_v: np.ndarray,
                spacing: float) -> np.ndarray:
    """Links grid vertex ``u`` -> boundary vertex ``n_g + v`` sharing a row or column within ``spacing``.

    Coordinates are compared within half a cell; both directions returned,
    boundary indices offset by ``len(grid_v)``.
    """
    region = Region(env, mask)
    tol = 0.5 * env.resolution
    ng = len(grid_v)
    edges = []
    if ng == 0 or len(bound_v) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    for u, g in enumerate(grid_v):
        dx = np.abs(bound_v[:, 0] - g[0])
        dy = np.abs(bound_v[:, 1] - g[1])
        cand = ((dx < spacing) & (dy <= tol)) | ((dy < spacing) & (dx <= tol))
        for v in np.nonzero(cand)[0]:
            if region.segment_inside(g, bound_v[v]):
                edges.append((u, ng + v))
                edges.append((ng + v, u))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class SweepGraph:
    vertices: np.ndarray  # (n, 2) world points
    kinds: np.ndarray  # (n,) GRID or BOUNDARY
    edges: np.ndarray  # (m, 2) directed index pairs
    edge_class: np.ndarray  # (m,) index into EDGE_CLASSES
    spacing: float
    anchor: np.ndarray
    component: np.ndarray  # (n,) True for the largest strongly connected component
    strongly_connected: bool

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def out_edges(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for e, (u, _) in enumerate(self.edges):
            adj[u].append(e)
        return adj

    def restricted(self) -> "SweepGraph":
        """Subgraph induced by the largest strongly connected component."""
        keep = np.nonzero(self.component)[0]
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        ok = self.component[self.edges[:, 0]] & self.component[self.edges[:, 1]]
        return SweepGraph(self.vertices[keep], self.kinds[keep], remap[self.edges[ok]],
                          self.edge_class[ok], self.spacing, self.anchor,
                          np.ones(len(keep), dtype=bool), True)

    def nearest_vertex(self, point, within_component: bool = True) -> int:
        d = np.linalg.norm(self.vertices - np.asarray(point, float), axis=1)
        if within_component:
            d = np.where(self.component, d, np.inf)
        return int(np.argmin(d))


def _largest_scc(n: int, edges: np.ndarray) -> tuple[np.ndarray, bool]:
    if n == 0:
        return np.zeros(0, dtype=bool), True
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)) if len(edges) else \
        coo_matrix((n, n))
    k, lab = connected_components(adj, directed=True, connection="strong")
    sizes = np.bincount(lab, minlength=k)
    return lab == int(np.argmax(sizes)), k == 1


def build_graph(env: Environment, labels: np.ndarray, i: int, robot: RobotModel,
                spacing: float | None = None) -> SweepGraph:
    """Sweep graph of partition ``i`` restricted to the robot-eroded free space."""
    mask = (labels == i) & erode_free_space(env, robot.body_radius)
    if not mask.any():
        raise InfeasibleGeometryError(f"partition {i} is empty after erosion")
    d = optimal_spacing(robot) if spacing is None else float(spacing)
    v0 = anchor_point(env, mask)
    if mask.sum() == 1:
        return SweepGraph(v0[None], np.array([GRID]), np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64),
                          d, v0, np.ones(1, dtype=bool), True)
    gv, ge = build_grid_part(env, mask, d, v0)
    bv, be, _ = build_boundary_part(env, mask, d, v0)
    ng = len(gv)
    gb = merge_parts(env, mask, gv, bv, d)
    verts = np.vstack([gv, bv]) if len(bv) else gv
    kinds = np.concatenate([np.full(ng, GRID), np.full(len(bv), BOUNDARY)])
    edges = np.vstack([ge, be + ng, gb]) if len(verts) else np.zeros((0, 2), dtype=np.int64)
    cls = np.concatenate([np.zeros(len(ge)), np.ones(len(be)), np.full(len(gb), 2)]).astype(np.int64)
    # drop duplicate edges (a boundary vertex may coincide with a lattice link)
    if len(edges):
        _, first = np.unique(edges, axis=0, return_index=True)
        first = np.sort(first)
        edges, cls = edges[first], cls[first]
        edges, cls = edges[edges[:, 0] != edges[:, 1]], cls[edges[:, 0] != edges[:, 1]]
    # isolated vertices are removed unless nothing else is left
    deg = np.bincount(edges.ravel(), minlength=len(verts)) if len(edges) else np.zeros(len(verts), int)
    keep = deg > 0
    if not keep.any():
        keep[0] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    verts, kinds = verts[keep], kinds[keep]
    edges = remap[edges] if len(edges) else edges
    comp, strong = _largest_scc(len(verts), edges)
    return SweepGraph(verts, kinds, edges.reshape(-1, 2), cls, d, v0, comp, strong)


def bridge_components(graph: SweepGraph) -> SweepGraph:
    """Join every strongly connected component to the rest with a pair of transit edges.

    Components arise when the partition is disconnected or erosion pinches a
    narrow passage. Components are attached greedily by their closest vertex
    pair (Euclidean); the robot executes a transit edge along a free-space
    path, which may leave the partition.
    """
    n = graph.n_vertices
    if n == 0 or graph.strongly_connected:
        return graph
    adj = coo_matrix((np.ones(len(graph.edges)), (graph.edges[:, 0], graph.edges[:, 1])), shape=(n, n))
    k, lab = connected_components(adj, directed=True, connection="strong")
    sizes = np.bincount(lab, minlength=k)
    joined = lab == int(np.argmax(sizes))
    extra = []
    for _ in range(k - 1):
        inside = np.nonzero(joined)[0]
        outside = np.nonzero(~joined)[0]
        d = np.linalg.norm(graph.vertices[inside][:, None, :] - graph.vertices[outside][None, :, :], axis=-1)
        a, b = np.unravel_index(int(np.argmin(d)), d.shape)
        u, v = int(inside[a]), int(outside[b])
        extra += [(u, v), (v, u)]
        joined |= lab == lab[v]
    edges = np.vstack([graph.edges.reshape(-1, 2), np.array(extra, dtype=np.int64)])
    cls = np.concatenate([graph.edge_class, np.full(len(extra), TRANSIT)]).astype(np.int64)
    return SweepGraph(graph.vertices, graph.kinds, edges, cls, graph.spacing, graph.anchor,
                      np.ones(n, dtype=bool), True)


def export_graph_csv(graph: SweepGraph, path) -> None:
    """Edge list ``ux,uy,vx,vy,class`` followed by a vertex list ``x,y,kind,component``."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("ux,uy,vx,vy,class\n")
        for (u, v), c in zip(graph.edges, graph.edge_class):
            a, b = graph.vertices[u], graph.vertices[v]
            fh.write(f"{a[0]:.6f},{a[1]:.6f},{b[0]:.6f},{b[1]:.6f},{EDGE_CLASSES[c]}\n")
        fh.write("\nx,y,kind,component\n")
        for p, k, c in zip(graph.vertices, graph.kinds, graph.component):
            fh.write(f"{p[0]:.6f},{p[1]:.6f},{'grid' if k == GRID else 'boundary'},{int(c)}\n")
