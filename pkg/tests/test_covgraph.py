from __future__ import annotations

import numpy as np
import pytest
from oracles import spacing_grid_search
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from percov import maps
from percov.covdyn import RobotModel
from percov.covgraph import (BOUNDARY, EDGE_CLASSES, GRID, TRANSIT, Region, anchor_point, bridge_components,
                             build_boundary_part, build_graph, build_grid_part, export_graph_csv, merge_parts,
                             optimal_spacing)
from percov.environment import Environment, InfeasibleGeometryError, erode_free_space
from percov.partition import compute_workload_map, random_generators, voronoi_baseline


def _n_scc(n, edges):
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    return connected_components(adj, directed=True, connection="strong")[0]


def _edge_set(edges):
    return {(int(u), int(v)) for u, v in edges}


def _segment_distance(pts, a, b):
    ab = b - a
    t = np.clip(np.einsum("pmk,mk->pm", pts[:, None] - a[None], ab) / np.maximum((ab**2).sum(1), 1e-18), 0, 1)
    proj = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(pts[:, None] - proj, axis=-1).min(axis=1)


# --- spacing ----------------------------------------------------------------

def test_spacing_matches_exhaustive_search():
    robot = RobotModel(coverage_radius=0.2)
    assert abs(optimal_spacing(robot) - spacing_grid_search(0.2)) <= 1e-3


def test_spacing_cone_footprint_matches_direct_quadrature():
    robot = RobotModel(coverage_radius=0.2, production=lambda d: 1.0 - d / 0.2)
    want = spacing_grid_search(0.2, production=lambda d: 1.0 - d / 0.2, d_step=2e-3)
    assert abs(optimal_spacing(robot) - want) <= 3e-3


def test_spacing_scales_with_radius():
    a = optimal_spacing(RobotModel(coverage_radius=0.2))
    b = optimal_spacing(RobotModel(coverage_radius=0.4))
    assert b / a == pytest.approx(2.0, rel=1e-9)
    assert 0 < a <= 0.4


def test_spacing_domain_edge():
    assert optimal_spacing(RobotModel(coverage_radius=0.2), bounds=(0.4, 0.4)) == 0.4
    with pytest.raises(ValueError):
        optimal_spacing(RobotModel(coverage_radius=0.2, production=lambda d: 0.0 * d))


# --- grid part --------------------------------------------------------------

def test_grid_lattice_counts_on_rectangle():
    env = maps.empty(20, 16, 0.5)  # 10 x 8 m
    mask = env.free.copy()
    v, e = build_grid_part(env, mask, 1.0, anchor=(0.0, 0.0))
    brute = {(x, y) for x in range(0, 11) for y in range(0, 9)}
    assert {(round(a), round(b)) for a, b in v} == brute and len(v) == 99
    assert len(e) == 2 * (10 * 9 + 11 * 8)
    d = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    assert np.allclose(d, 1.0, atol=1e-9)
    assert _edge_set(e) == {(b, a) for a, b in _edge_set(e)}


def test_anchor_is_leftmost_then_bottommost():
    env = maps.empty(10, 10, 0.1)
    mask = np.zeros(env.free.shape, bool)
    mask[6:9, 3] = True
    mask[2, 5] = True
    assert np.allclose(anchor_point(env, mask), env.center_of((6, 3)))
    with pytest.raises(InfeasibleGeometryError):
        anchor_point(env, np.zeros_like(mask))


def test_narrow_partition_has_one_column():
    env = maps.empty(40, 40, 0.1)
    mask = np.zeros(env.free.shape, bool)
    mask[:, 17:19] = True  # 0.2 m wide strip
    v, _ = build_grid_part(env, mask, 1.0)
    assert len(np.unique(np.round(v[:, 0], 9))) <= 1


def test_grid_edge_through_notch_excluded():
    env = maps.empty(10, 10, 0.5)  # 5 x 5 m
    mask = env.free.copy()
    mask[0:6, 3] = False  # wall x in [1.5, 2.0), y in [0, 3)
    v, e = build_grid_part(env, mask, 1.0, anchor=(0.0, 0.0))
    idx = {(round(a), round(b)): n for n, (a, b) in enumerate(v)}
    es = _edge_set(e)
    for y in (0, 1, 2):
        assert (idx[(1, y)], idx[(2, y)]) not in es
    assert (idx[(1, 3)], idx[(2, 3)]) in es
    # brute force line-of-sight for every lattice neighbour pair
    for (x, y), u in idx.items():
        w = idx.get((x + 1, y))
        if w is None:
            continue
        blocked = any(not mask[int(y / 0.5) if y < 5 else 9, int(xx / 0.5)]
                      for xx in np.linspace(x + 0.01, x + 0.99, 50)) and y < 3
        assert ((u, w) in es) == (not blocked)


# --- boundary part ----------------------------------------------------------

def test_boundary_square_ring():
    env = maps.empty(8, 8, 0.5)  # 4 x 4 m
    v, e, loops = build_boundary_part(env, env.free.copy(), 1.0, anchor=(0.0, 0.0))
    assert len(v) == 32
    per = np.concatenate([np.arange(0, 4, 0.5)])
    expected = {(x, 0.0) for x in per} | {(4.0, y) for y in per} | {(4.0 - x, 4.0) for x in per} | \
        {(0.0, 4.0 - y) for y in per}
    assert {(round(a, 9), round(b, 9)) for a, b in v} == {(round(a, 9), round(b, 9)) for a, b in expected}
    deg = np.bincount(e[:, 0], minlength=len(v))
    assert np.all(deg == 2) and _n_scc(len(v), e) == 1
    assert set(loops) == {0}
    steps = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    assert np.allclose(steps, 0.5)


def test_boundary_with_hole_has_two_cycles():
    env = maps.empty(20, 20, 0.25)
    mask = env.free.copy()
    mask[8:12, 8:12] = False
    v, e, loops = build_boundary_part(env, mask, 1.0)
    assert set(loops) == {0, 1}
    assert _n_scc(len(v), e) == 2
    assert not np.any(loops[e[:, 0]] != loops[e[:, 1]])


def test_single_cell_partition_graph():
    env = maps.empty(10, 10, 0.1)
    labels = np.ones(env.free.shape, int)
    labels[4, 4] = 0
    g = build_graph(env, labels, 0, RobotModel(body_radius=0.0))
    assert g.n_vertices == 1 and g.n_edges == 0 and g.strongly_connected


# --- merge ------------------------------------------------------------------

def test_merge_distance_rule():
    env = maps.empty(40, 40, 0.1)
    mask = env.free.copy()
    d = 1.0
    g = np.array([[1.0, 1.0]])
    b = np.array([[1.4, 1.0], [2.2, 1.0], [1.0, 1.4], [1.0, 2.2], [1.3, 1.3]])
    e = merge_parts(env, mask, g, b, d)
    linked = {int(v) - 1 for u, v in e if u == 0}
    assert linked == {0, 2}
    assert _edge_set(e) == {(v, u) for u, v in _edge_set(e)}


def test_full_square_graph_strongly_connected():
    env = maps.empty(40, 30, 0.1)
    g = build_graph(env, np.zeros(env.free.shape, int), 0, RobotModel())
    assert g.strongly_connected and g.component.all()
    assert set(np.unique(g.edge_class)) == {0, 1, 2}
    grid = g.edges[g.edge_class == 0]
    assert np.allclose(np.linalg.norm(g.vertices[grid[:, 0]] - g.vertices[grid[:, 1]], axis=1), g.spacing,
                       atol=1e-9)
    assert _edge_set(g.edges) == {(v, u) for u, v in _edge_set(g.edges)}
    assert np.all(g.kinds[g.edges[g.edge_class == 1]] == BOUNDARY)
    gb = g.edges[g.edge_class == 2]
    assert np.all(np.sort(g.kinds[gb], axis=1) == [GRID, BOUNDARY])


def test_partitions_stay_inside_and_cover():
    env = maps.builtin("rooms")
    robot = RobotModel()
    wm = compute_workload_map(env, 1.0, 0.9995, 80.0)
    d = voronoi_baseline(env, wm, random_generators(env, 3, 2))
    eroded = erode_free_space(env, robot.body_radius)
    graphs = []
    for i in range(3):
        g = build_graph(env, d.labels, i, robot)
        mask = (d.labels == i) & eroded
        region = Region(env, mask)
        assert region.contains(g.vertices).all()
        for u, v in g.edges:
            assert region.segment_inside(g.vertices[u], g.vertices[v])
        # coverage reachability: robots cover while driving, so distance is to the edge segments
        e = g.edges[g.component[g.edges[:, 0]] & g.component[g.edges[:, 1]]]
        near = _segment_distance(env.centers[mask], g.vertices[e[:, 0]], g.vertices[e[:, 1]])
        graphs.append((g, mask))
        if g.strongly_connected:
            assert np.mean(near <= robot.coverage_radius + 1e-9) >= 0.99
    # vertices of different partitions only meet on shared cell edges
    for a in range(3):
        for b in range(a + 1, 3):
            ga, _ = graphs[a]
            _, mb = graphs[b]
            inside_b = Region(env, mb).contains(ga.vertices)
            interior = inside_b & ~Region(env, graphs[a][1]).contains(ga.vertices)
            assert not interior.any()


def test_empty_eroded_partition_raises():
    env = maps.empty(10, 10, 0.1)
    labels = np.ones(env.free.shape, int)
    labels[0, 0] = 0
    with pytest.raises(InfeasibleGeometryError):
        build_graph(env, labels, 0, RobotModel(body_radius=0.1))


def test_bridge_components_joins_islands(tmp_path):
    free = np.ones((20, 40), bool)
    free[:, 19:21] = False
    env = Environment(free, 0.1)
    g = build_graph(env, np.zeros(free.shape, int), 0, RobotModel())
    assert not g.strongly_connected
    bg = bridge_components(g)
    assert bg.strongly_connected and bg.component.all()
    assert _n_scc(bg.n_vertices, bg.edges) == 1
    t = bg.edges[bg.edge_class == TRANSIT]
    assert len(t) == 2 and _edge_set(t) == {(v, u) for u, v in _edge_set(t)}
    assert bridge_components(bg) is bg
    export_graph_csv(bg, tmp_path / "g.csv")
    text = (tmp_path / "g.csv").read_text()
    assert text.startswith("ux,uy,vx,vy,class") and f",{EDGE_CLASSES[TRANSIT]}\n" in text
    assert "x,y,kind,component" in text
