"""Geodesic distances on occupancy grids.

An 8-connected Dijkstra gives grid distances, reachability and a
shortest-path tree. The geodesic (any-angle) distance is then exact for the
polygonal obstacles of the grid: shortest paths only bend at convex obstacle
corners, so a Dijkstra over the corner visibility graph followed by a
best-visible-corner pick per cell yields taut polylines
``[q, h1, ..., hl, source]``. Corner visibility is computed once per map.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .environment import Environment

METRICATION_TOLERANCE = 0.01
SOURCE = -1

_DI = np.array([-1, -1, -1, 0, 0, 1, 1, 1], dtype=np.int64)
_DJ = np.array([-1, 0, 1, -1, 1, -1, 0, 1], dtype=np.int64)


class UnreachableError(ValueError):
    pass


@numba.njit(cache=True)
def _dijkstra8(free, si, sj, res):
    h, w = free.shape
    n = h * w
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    diag = math.sqrt(2.0) * res
    s = si * w + sj
    dist[s] = 0.0
    heap = [(0.0, s)]
    count = 0
    while len(heap) > 0:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        order[count] = u
        count += 1
        ui = u // w
        uj = u - ui * w
        for k in range(8):
            vi = ui + _DI[k]
            vj = uj + _DJ[k]
            if vi < 0 or vi >= h or vj < 0 or vj >= w or not free[vi, vj]:
                continue
            if _DI[k] != 0 and _DJ[k] != 0:
                # no squeezing diagonally between two obstacle cells
                if not free[ui, vj] or not free[vi, uj]:
                    continue
                step = diag
            else:
                step = res
            v = vi * w + vj
            nd = d + step
            if nd < dist[v]:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, parent, order[:count]


@numba.njit(cache=True)
def _los(free, ax, ay, bx, by):
    """Segment (ax, ay)-(bx, by) in cell units touches only free cells.

    Coordinates are continuous with cell (i, j) spanning [j, j+1) x [i, i+1).
    Corner crossings count both adjacent cells (conservative).
    """
    h, w = free.shape
    ci = int(math.floor(ay))
    cj = int(math.floor(ax))
    ei = int(math.floor(by))
    ej = int(math.floor(bx))
    if ci < 0 or ci >= h or cj < 0 or cj >= w or not free[ci, cj]:
        return False
    if ei < 0 or ei >= h or ej < 0 or ej >= w or not free[ei, ej]:
        return False
    dx = bx - ax
    dy = by - ay
    sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
    sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
    if sx != 0:
        nx = (cj + 1) if sx > 0 else cj
        tmx = (nx - ax) / dx
        tdx = abs(1.0 / dx)
    else:
        tmx = np.inf
        tdx = np.inf
    if sy != 0:
        ny = (ci + 1) if sy > 0 else ci
        tmy = (ny - ay) / dy
        tdy = abs(1.0 / dy)
    else:
        tmy = np.inf
        tdy = np.inf
    steps = abs(ei - ci) + abs(ej - cj)
    for _ in range(steps + 2):
        if ci == ei and cj == ej:
            return True
        if abs(tmx - tmy) < 1e-12:
            if tmx > 1.0:
                return True
            # passing exactly through a cell corner
            ni = ci + sy
            nj = cj + sx
            if nj < 0 or nj >= w or ni < 0 or ni >= h:
                return False
            if not free[ci, nj] or not free[ni, cj]:
                return False
            ci += sy
            cj += sx
            tmx += tdx
            tmy += tdy
        elif tmx < tmy:
            if tmx > 1.0:
                return True
            cj += sx
            tmx += tdx
        else:
            if tmy > 1.0:
                return True
            ci += sy
            tmy += tdy
        if ci < 0 or ci >= h or cj < 0 or cj >= w or not free[ci, cj]:
            return False
    return ci == ei and cj == ej


# waypoints sit this far (cell units) off the exact obstacle corner, inside
# the free cell diagonally opposite the obstacle, so that segments grazing the
# corner are unambiguous for the traversal
CORNER_NUDGE = 1e-5


def convex_corners(free: np.ndarray) -> np.ndarray:
    """Grid vertices where exactly one of the four surrounding cells is occupied.

    These are the only points where a shortest obstacle-avoiding path can
    bend. Returned as (K, 2) ``(x, y)`` in cell units, nudged into free space.
    """
    occ = ~np.asarray(free, dtype=bool)
    sw, se = occ[:-1, :-1], occ[:-1, 1:]
    nw, ne = occ[1:, :-1], occ[1:, 1:]
    count = sw.astype(int) + se + nw + ne
    ii, jj = np.nonzero(count == 1)
    # vertex (x, y) = (jj + 1, ii + 1); push away from the occupied cell
    dx = np.where(sw[ii, jj] | nw[ii, jj], 1.0, -1.0)
    dy = np.where(sw[ii, jj] | se[ii, jj], 1.0, -1.0)
    return np.stack([jj + 1 + CORNER_NUDGE * dx, ii + 1 + CORNER_NUDGE * dy], axis=1).astype(float)


@numba.njit(cache=True)
def _corner_visibility(free, corners):
    h, w = free.shape
    k = corners.shape[0]
    cells = np.zeros((k, h * w), dtype=np.bool_)
    pairs = np.zeros((k, k), dtype=np.bool_)
    for a in range(k):
        ax = corners[a, 0]
        ay = corners[a, 1]
        for b in range(a + 1, k):
            if _los(free, ax, ay, corners[b, 0], corners[b, 1]):
                pairs[a, b] = True
                pairs[b, a] = True
        for i in range(h):
            for j in range(w):
                if free[i, j] and _los(free, j + 0.5, i + 0.5, ax, ay):
                    cells[a, i * w + j] = True
    return cells, pairs


@numba.njit(cache=True)
def _exact(free, reach, gx, gy, corners, cvis, ccvis):
    """Shortest any-angle distances from the point ``(gx, gy)`` (cell units).

    A dense Dijkstra over the corner visibility graph gives exact corner
    distances; each cell then takes the best corner (or the source) it sees.
    """
    h, w = free.shape
    n = h * w
    k = corners.shape[0]
    wl = np.full(k, np.inf)
    nxt = np.full(k, -1, dtype=np.int64)
    done = np.zeros(k, dtype=np.bool_)
    for a in range(k):
        if _los(free, corners[a, 0], corners[a, 1], gx, gy):
            wl[a] = math.hypot(corners[a, 0] - gx, corners[a, 1] - gy)
    for _ in range(k):
        u = -1
        best = np.inf
        for a in range(k):
            if not done[a] and wl[a] < best:
                best = wl[a]
                u = a
        if u < 0:
            break
        done[u] = True
        for b in range(k):
            if not done[b] and ccvis[u, b]:
                nd = wl[u] + math.hypot(corners[b, 0] - corners[u, 0], corners[b, 1] - corners[u, 1])
                if nd < wl[b]:
                    wl[b] = nd
                    nxt[b] = u
    wtail = np.full(k, -1, dtype=np.int64)
    order = np.argsort(wl)
    for idx in range(k):
        a = order[idx]
        if not np.isfinite(wl[a]):
            break
        wtail[a] = a if nxt[a] < 0 else wtail[nxt[a]]
    anchor = np.full(n, -2, dtype=np.int64)
    length = np.full(n, np.inf)
    tail = np.full(n, -2, dtype=np.int64)
    for c in range(n):
        if not reach[c]:
            continue
        ci = c // w
        cj = c - ci * w
        cx = cj + 0.5
        cy = ci + 0.5
        if _los(free, cx, cy, gx, gy):
            anchor[c] = -1
            length[c] = math.hypot(cx - gx, cy - gy)
            tail[c] = -1
            continue
        best = np.inf
        ba = -2
        for a in range(k):
            if cvis[a, c] and wl[a] < np.inf:
                cand = math.hypot(cx - corners[a, 0], cy - corners[a, 1]) + wl[a]
                if cand < best:
                    best = cand
                    ba = a
        if ba >= 0:
            anchor[c] = ba
            length[c] = best
            tail[c] = wtail[ba]
    return anchor, length, tail, wl, nxt


@dataclass(frozen=True)
class GeodesicField:
    """Distances from one source point to every free cell.

    ``dist``/``parent`` hold the 8-connected grid distances (meters) and the
    shortest-path tree. ``length`` holds the any-angle geodesic distance, whose
    path is the polyline ``[q, h1, ..., hl, source]`` through obstacle corners.
    ``anchor`` (first waypoint h1) and ``tail`` (last waypoint hl) index the
    corner table ``corners`` (world coordinates), with ``SOURCE`` (-1) meaning
    the source itself for ``anchor`` and "no corner, the path is direct" for
    ``tail``; -2 marks unreachable cells. ``corner_length``/``corner_next``
    give each corner's own distance and next waypoint toward the source.
    """

    env: Environment
    source: np.ndarray
    dist: np.ndarray
    parent: np.ndarray
    length: np.ndarray
    anchor: np.ndarray
    tail: np.ndarray
    corners: np.ndarray = field(repr=False)
    corner_length: np.ndarray = field(repr=False)
    corner_next: np.ndarray = field(repr=False)

    @property
    def source_cell(self) -> tuple[int, int]:
        return self.env.cell_of(self.source)

    def point_of(self, idx: int) -> np.ndarray:
        if idx == SOURCE:
            return self.source.copy()
        return self.corners[int(idx)].copy()

    def points_of(self, idx: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`point_of` for an index array (must be >= -1)."""
        idx = np.asarray(idx)
        if len(self.corners) == 0:
            return np.broadcast_to(self.source, idx.shape + (2,)).copy()
        pts = self.corners[np.maximum(idx, 0)]
        return np.where((idx == SOURCE)[..., None], self.source, pts)

    def waypoint_length(self, idx: np.ndarray) -> np.ndarray:
        """Geodesic distance of waypoints (0 for the source)."""
        idx = np.asarray(idx)
        if len(self.corners) == 0:
            return np.zeros(idx.shape)
        return np.where(idx >= 0, self.corner_length[np.maximum(idx, 0)], 0.0)

    def distance_at(self, points: np.ndarray) -> np.ndarray:
        """Geodesic distance at arbitrary points, through the anchor of their cell.

        Exact wherever the anchor of the containing cell is visible from the
        point and stays the best waypoint, i.e. away from visibility edges.
        """
        env = self.env
        pts = np.asarray(points, dtype=float)
        flat = np.ascontiguousarray(pts.reshape(-1, 2))
        table = np.ascontiguousarray(np.vstack([self.source[None, :], self.corners]))
        lens = np.concatenate([[0.0], self.corner_length])
        out = _distance_through_anchor(flat, np.ascontiguousarray(self.anchor), table, lens,
                                       float(env.origin[0]), float(env.origin[1]), float(env.resolution))
        return out.reshape(pts.shape[:-1])


@numba.njit(cache=True)
def _distance_through_anchor(pts, anchor, table, lens, ox, oy, res):
    h, w = anchor.shape
    out = np.empty(pts.shape[0])
    for m in range(pts.shape[0]):
        x = pts[m, 0]
        y = pts[m, 1]
        j = int(math.floor((x - ox) / res))
        i = int(math.floor((y - oy) / res))
        if i < 0 or i >= h or j < 0 or j >= w or anchor[i, j] < -1:
            out[m] = np.inf
            continue
        k = anchor[i, j] + 1
        out[m] = math.hypot(x - table[k, 0], y - table[k, 1]) + lens[k]
    return out


def _corner_data(env: Environment):
    data = env._cache.get("corners")
    if data is None:
        corners = convex_corners(env.free)
        free = np.ascontiguousarray(env.free)
        if len(corners):
            cvis, ccvis = _corner_visibility(free, corners)
        else:
            cvis = np.zeros((0, env.free.size), dtype=bool)
            ccvis = np.zeros((0, 0), dtype=bool)
        world = corners * env.resolution + np.asarray(env.origin, float) if len(corners) else np.zeros((0, 2))
        data = (corners, world, cvis, ccvis)
        env._cache["corners"] = data
    return data


def geodesic_field(env: Environment, source) -> GeodesicField:
    """Geodesic (shortest obstacle-avoiding) distances from ``source`` to every cell."""
    source = np.asarray(source, dtype=float)
    si, sj = env.cell_of(source)
    if not env.in_bounds((si, sj)):
        raise ValueError(f"source {tuple(source)} outside the map")
    if not env.free[si, sj]:
        raise ValueError(f"source {tuple(source)} lies in an obstacle")
    res = env.resolution
    free = np.ascontiguousarray(env.free)
    dist, parent, _ = _dijkstra8(free, si, sj, res)
    corners, world, cvis, ccvis = _corner_data(env)
    gx = (source[0] - env.origin[0]) / res
    gy = (source[1] - env.origin[1]) / res
    reach = np.isfinite(dist)
    anchor, length, tail, wl, nxt = _exact(free, reach, gx, gy, corners.reshape(-1, 2), cvis, ccvis)
    shape = env.free.shape
    arrays = [dist.reshape(shape), parent.reshape(shape), (length * res).reshape(shape),
              anchor.reshape(shape), tail.reshape(shape), world, wl * res, nxt]
    for a in arrays:
        a.setflags(write=False)
    return GeodesicField(env, source, *arrays)


def _cell_units(env: Environment, p) -> tuple[float, float]:
    return (p[0] - env.origin[0]) / env.resolution, (p[1] - env.origin[1]) / env.resolution


def line_of_sight(env: Environment, a, b, mask: np.ndarray | None = None) -> bool:
    """True when segment a-b (world points) crosses only free cells (of ``mask`` if given)."""
    grid = env.free if mask is None else np.ascontiguousarray(mask & env.free)
    ax, ay = _cell_units(env, a)
    bx, by = _cell_units(env, b)
    return bool(_los(grid, ax, ay, bx, by))


def string_pull(fld: GeodesicField, q) -> list[np.ndarray]:
    """Waypoint chain ``[q, h1, ..., hl, source]`` of mutually visible points.

    Returns ``[q]`` when ``q`` coincides with the source.
    """
    env = fld.env
    q = np.asarray(q, dtype=float)
    cell = env.cell_of(q)
    if not env.in_bounds(cell) or not np.isfinite(fld.length[cell]):
        raise UnreachableError(f"point {tuple(q)} is not reachable from the source")
    if np.allclose(q, fld.source):
        return [q]
    if line_of_sight(env, q, fld.source):
        return [q, fld.source.copy()]
    # best corner visible from q itself (q need not be a cell center)
    best, a = math.inf, None
    for k in np.nonzero(np.isfinite(fld.corner_length))[0]:
        cand = float(np.linalg.norm(q - fld.corners[k])) + float(fld.corner_length[k])
        if cand < best and line_of_sight(env, q, fld.corners[k]):
            best, a = cand, int(k)
    if a is None:
        raise UnreachableError(f"no waypoint visible from {tuple(q)}")
    chain = [q]
    while a != SOURCE:
        chain.append(fld.corners[a].copy())
        a = int(fld.corner_next[a])
    chain.append(fld.source.copy())
    return chain


def chain_length(chain) -> float:
    pts = np.asarray(chain, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def first_hop_direction(fld: GeodesicField, q) -> np.ndarray:
    """Unit vector from the first waypoint toward the source to ``q``.

    This is the gradient of the geodesic distance with respect to ``q``.
    """
    chain = string_pull(fld, q)
    if len(chain) < 2:
        raise ValueError("direction undefined at the source")
    v = chain[0] - chain[1]
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("direction undefined at the source")
    return v / n


def grid_path(fld: GeodesicField, q) -> list[tuple[int, int]]:
    """Cells of the raw 8-connected shortest path from q's cell back to the source cell."""
    env = fld.env
    i, j = env.cell_of(q)
    if not env.in_bounds((i, j)) or not np.isfinite(fld.dist[i, j]):
        raise UnreachableError("unreachable")
    out = [(i, j)]
    p = int(fld.parent[i, j])
    while p >= 0:
        out.append(divmod(p, env.width))
        p = int(fld.parent.reshape(-1)[p])
    return out


def export_field_csv(fld: GeodesicField, path) -> None:
    """Per-cell pulled distances, row-major from the bottom row; header ``width,height,resolution``."""
    env = fld.env
    with open(path, "w") as fh:
        fh.write("width,height,resolution\n")
        fh.write(f"{env.width},{env.height},{env.resolution}\n")
        for row in fld.length:
            fh.write(",".join("inf" if not np.isfinite(v) else f"{v:.6f}" for v in row) + "\n")
