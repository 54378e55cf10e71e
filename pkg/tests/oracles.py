"""Independent reference computations used by the tests.

Nothing here calls the routines it checks: the equity-cost oracle re-assigns
sub-cell samples from raw distances, the geodesic oracle is a plain Dijkstra
over a visibility graph of obstacle corners, and the planner oracle enumerates
simple paths.
"""

from __future__ import annotations

import heapq
import itertools
import math

import numpy as np
from scipy import ndimage

from percov.geodesic import geodesic_field


def fibonacci_lattice(n_fib=(1597, 987)):
    """Rank-1 lattice on the unit square, centred on 0.

    Its projections on every direction are nearly uniform, so a straight
    boundary moving by a tiny amount always sweeps over a proportional number
    of points (a square sample grid aligned with an axis-parallel boundary would
    not see the move at all).
    """
    n, g = n_fib
    k = np.arange(n)
    return np.stack([(k + 0.5) / n, ((k * g) % n + 0.5) / n], axis=1) - 0.5


def supersampled_cost(env, fields, weights, lam, samples=None, capabilities=None, band=1):
    """Equity cost with sub-cell resolution on a band around the boundaries.

    Each free cell's workload ``lam * area`` is split among robots by the
    fraction of its sub-points (a Fibonacci lattice, or a ``samples x samples``
    grid if ``samples`` is given) each robot wins; distances at sub-points come
    from the fields' own distance decomposition.
    """
    n = len(fields)
    weights = np.asarray(weights, dtype=float)
    power = np.stack([f.length**2 - w for f, w in zip(fields, weights)])
    labels = np.argmin(power, axis=0)
    reach = np.isfinite(power.min(axis=0)) & env.free
    labels = np.where(reach, labels, -1)
    # cells whose neighbourhood holds several labels get sub-sampled
    mixed = np.zeros_like(reach)
    for k in range(n):
        mine = labels == k
        mixed |= ndimage.binary_dilation(mine, iterations=band) & reach & ~mine
    mixed = ndimage.binary_dilation(mixed, iterations=1) & reach
    area = env.cell_area
    loads = np.zeros(n)
    plain = reach & ~mixed
    np.add.at(loads, labels[plain], lam[plain] * area)
    ii, jj = np.nonzero(mixed)
    if samples is None:
        sub = fibonacci_lattice() * env.resolution
    else:
        offs = (np.arange(samples) + 0.5) / samples - 0.5
        ox, oy = np.meshgrid(offs, offs)
        sub = np.stack([ox.ravel(), oy.ravel()], axis=1) * env.resolution
    chunk = 256
    for s in range(0, ii.size, chunk):
        ci, cj = ii[s:s + chunk], jj[s:s + chunk]
        pts = env.centers[ci, cj][:, None, :] + sub[None, :, :]
        pw = np.stack([f.distance_at(pts) ** 2 - w for f, w in zip(fields, weights)])
        win = np.argmin(pw, axis=0)  # (cells, samples)
        for k in range(n):
            frac = (win == k).mean(axis=1)
            loads[k] += float((lam[ci, cj] * area * frac).sum())
    frac = loads / loads.sum()
    c = np.ones(n) if capabilities is None else np.asarray(capabilities, dtype=float)
    return float(np.sum(c**2 / frac)), frac


def fd_weight_gradient(env, fields, weights, lam, i, delta, **kw):
    wp = np.array(weights, dtype=float)
    wm = wp.copy()
    wp[i] += delta
    wm[i] -= delta
    hp, _ = supersampled_cost(env, fields, wp, lam, **kw)
    hm, _ = supersampled_cost(env, fields, wm, lam, **kw)
    return (hp - hm) / (2 * delta)


def fd_generator_gradient(env, generators, weights, lam, i, delta, fields=None, **kw):
    generators = np.asarray(generators, dtype=float)
    fields = list(fields) if fields is not None else [geodesic_field(env, g) for g in generators]
    out = np.zeros(2)
    for k in range(2):
        vals = []
        for sgn in (1, -1):
            g = generators[i].copy()
            g[k] += sgn * delta
            fl = list(fields)
            fl[i] = geodesic_field(env, g)
            vals.append(supersampled_cost(env, fl, weights, lam, **kw)[0])
        out[k] = (vals[0] - vals[1]) / (2 * delta)
    return out


def brute_force_geodesic(env, a, b):
    """Exact shortest obstacle-avoiding path length between two points.

    Visibility graph over obstacle-cell corners (the polygonal obstacles of a
    grid map) plus the two endpoints; visibility tested by dense sampling of
    each segment with a small inward tolerance.
    """
    res = env.resolution
    occ = ~env.free
    h, w = occ.shape
    corners = set()
    ii, jj = np.nonzero(occ)
    for i, j in zip(ii, jj):
        for di in (0, 1):
            for dj in (0, 1):
                corners.add((j + dj, i + di))
    # keep convex-ish corners only: touching at least one free cell
    pts = [np.array(a, float), np.array(b, float)]
    for cx, cy in corners:
        if 0 < cx < w and 0 < cy < h:
            around = occ[cy - 1:cy + 1, cx - 1:cx + 1]
            if around.sum() == 1:
                pts.append(np.array([cx * res + env.origin[0], cy * res + env.origin[1]]))

    occ_pad = np.pad(occ, 1, constant_values=True)

    def blocked_at(x, y):
        """Point (cell units) lies inside the closed obstacles, or at a pinch."""
        jx = np.floor(x).astype(int)
        iy = np.floor(y).astype(int)
        onx = np.abs(x - np.round(x)) < 1e-7
        ony = np.abs(y - np.round(y)) < 1e-7
        # cells touching the point (padded coordinates: +1)
        xl = np.where(onx, np.round(x).astype(int) - 1, jx) + 1
        xr = np.where(onx, np.round(x).astype(int), jx) + 1
        yb = np.where(ony, np.round(y).astype(int) - 1, iy) + 1
        yt = np.where(ony, np.round(y).astype(int), iy) + 1
        xl, xr = np.clip(xl, 0, w + 1), np.clip(xr, 0, w + 1)
        yb, yt = np.clip(yb, 0, h + 1), np.clip(yt, 0, h + 1)
        a, b = occ_pad[yb, xl], occ_pad[yb, xr]
        c, d = occ_pad[yt, xl], occ_pad[yt, xr]
        count = a.astype(int) + b + c + d
        interior = np.where(onx & ony, (count >= 3) | (a & d & ~b & ~c) | (b & c & ~a & ~d),
                            np.where(onx | ony, a & b & c & d, a))
        return interior

    def visible(p, q):
        d = np.linalg.norm(q - p)
        m = max(2, int(d / (res * 0.02)))
        t = np.linspace(0, 1, m)[:, None]
        s = p + t * (q - p)
        x = (s[:, 0] - env.origin[0]) / res
        y = (s[:, 1] - env.origin[1]) / res
        return not blocked_at(x, y).any()

    n = len(pts)
    dist = [math.inf] * n
    dist[0] = 0.0
    heap = [(0.0, 0)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        if u == 1:
            return d
        for v in range(n):
            if v == u:
                continue
            nd = d + float(np.linalg.norm(pts[v] - pts[u]))
            if nd < dist[v] and visible(pts[u], pts[v]):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return math.inf


def brute_force_grid_dijkstra(free, src, res):
    """Textbook 8-connected Dijkstra over a dict-of-cells graph."""
    h, w = free.shape
    dist = {src: 0.0}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if (i, j) in done:
            continue
        done.add((i, j))
        for di, dj in itertools.product((-1, 0, 1), repeat=2):
            if di == dj == 0:
                continue
            vi, vj = i + di, j + dj
            if not (0 <= vi < h and 0 <= vj < w) or not free[vi, vj]:
                continue
            if di and dj and not (free[i, vj] and free[vi, j]):
                continue
            nd = d + res * (math.sqrt(2) if di and dj else 1.0)
            if nd < dist.get((vi, vj), math.inf):
                dist[(vi, vj)] = nd
                heapq.heappush(heap, (nd, (vi, vj)))
    out = np.full(free.shape, np.inf)
    for (i, j), d in dist.items():
        out[i, j] = d
    return out


def best_mean_path(succ, weight, start, coords=None):
    """Exhaustive search of simple paths from ``start`` maximising mean edge weight.

    ``succ[u]`` lists successors, ``weight[(u, v)]`` the edge weight. Ties: the
    longer path, then the smallest end vertex (by ``coords`` if given).
    Returns (metric, path) or (None, [start]) when no edge leaves ``start``.
    """
    best = None
    best_path = [start]

    def key(metric, path):
        end = path[-1]
        endkey = tuple(coords[end]) if coords is not None else (end,)
        return (metric, len(path), tuple(-x for x in endkey))

    stack = [(start, [start], 0.0)]
    while stack:
        u, path, s = stack.pop()
        if len(path) > 1:
            m = s / (len(path) - 1)
            if best is None or key(m, path) > key(*best):
                best = (m, list(path))
        for v in succ[u]:
            if v not in path:
                stack.append((v, path + [v], s + weight[(u, v)]))
    if best is None:
        return None, best_path
    return best


def disk_overlap_objective(d, radius):
    """Closed-form overlap objective for a uniform unit disk: ``2 pi r^2 + 2 lens(d) - (2 pi r^2)^2 / A(d)``."""
    d = np.asarray(d, dtype=float)
    r = radius
    lens = 2 * r * r * np.arccos(np.clip(d / (2 * r), -1, 1)) - 0.5 * d * np.sqrt(np.maximum(4 * r * r - d * d, 0))
    return 2 * np.pi * r * r + 2 * lens - (2 * np.pi * r * r) ** 2 / (2 * r * (d + 2 * r))


def spacing_grid_search(radius, production=None, d_step=1e-3, h=None):
    """Exhaustive search of the two-footprint overlap objective on ``d = d_step, 2 d_step, ..., 2 r``.

    Uniform disks use the closed form; other footprints a direct 2-D midpoint
    evaluation of ``int (s - mean s)^2`` over ``[-r, r] x [-r, d + r]``, where
    ``s`` is the summed production of footprints centred at ``(0, 0)`` and ``(0, d)``.
    """
    ds = np.arange(1, int(round(2 * radius / d_step)) + 1) * d_step
    if production is None:
        return float(ds[np.argmin(disk_overlap_objective(ds, radius))])
    h = radius / 100.0 if h is None else h

    def alpha(x, y):
        dist = np.hypot(x, y)
        return np.where(dist <= radius, production(dist), 0.0)

    best = (np.inf, None)
    xs = np.arange(-radius + h / 2, radius, h)
    for d in ds:
        ys = np.arange(-radius + h / 2, d + radius, h)
        x, y = np.meshgrid(xs, ys)
        s = alpha(x, y) + alpha(x, y - d)
        area = 2 * radius * (d + 2 * radius)
        mass = s.sum() * h * h
        J = (s**2).sum() * h * h - mass**2 / area
        if J < best[0]:
            best = (J, d)
    return float(best[1])


def random_small_graph(rng, n_min=3, n_max=10, p_extra=0.3):
    """Random symmetric digraph on random points: a random spanning tree plus extra edges.

    Returns ``(points, edges)``; vertex 0 reaches every vertex.
    """
    n = int(rng.integers(n_min, n_max + 1))
    pts = rng.uniform(0, 1, (n, 2))
    edges = set()
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges |= {(u, v), (v, u)}
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p_extra:
                edges |= {(u, v), (v, u)}
    return pts, np.array(sorted(edges), dtype=np.int64)
