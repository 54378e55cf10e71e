"""Equitable geodesic power diagrams.

Each robot owns a generator ``g_i`` and a power weight ``w_i``; free cell ``q``
goes to ``argmin_i d_g(q, g_i)**2 - w_i``. The equity cost is
``H = sum_i c_i**2 / lambda_i`` over partition workloads expressed as fractions
of the total, minimised when ``lambda_i / c_i`` is the same for every robot.
Its gradients are boundary integrals, evaluated here as sums over 4-adjacent
cell pairs straddling each boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .environment import Environment, erode_free_space
from .geodesic import SOURCE, GeodesicField, geodesic_field, line_of_sight

log = logging.getLogger(__name__)

NORMAL_EPS = 1e-6
WORKLOAD_CLAMP = 1e-9
CONVERGENCE_SPREAD = 5.0  # percentage points
BACKTRACK_TRIES = 8

_FOUR = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)


class DegeneratePartitionError(RuntimeError):
    """A partition carries (numerically) no workload."""


# ---------------------------------------------------------------------------
# workload
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadMap:
    lam: np.ndarray  # per-cell workload density, 0 off free space
    total: float  # integral of lam over free space

    @property
    def density(self) -> np.ndarray:
        """Workload density as a fraction of the total per square meter."""
        return self.lam / self.total

    def share_percent(self, env: Environment) -> np.ndarray:
        """Per-cell share of the total workload, in percent."""
        return 100.0 * self.lam * env.cell_area / self.total


def linear_fields(env: Environment, decay: float | np.ndarray = 0.9995):
    """Importance, decay and objective fields growing linearly with height.

    ``phi = 0.5 + 0.5 y/Y`` and ``zstar = 80 + 20 y/Y`` where ``y`` is the
    cell-center height and ``Y`` the map height.
    """
    y = env.centers[..., 1] - env.origin[1]
    frac = y / env.extent[1]
    phi = 0.5 + 0.5 * frac
    zstar = 80.0 + 20.0 * frac
    d = np.broadcast_to(np.asarray(decay, dtype=float), env.free.shape).copy()
    return phi, d, zstar


def gaussian_decay(env: Environment, center, d_min: float = 0.999, d_max: float = 0.9995,
                   sigma: float | None = None) -> np.ndarray:
    """Decay field with a Gaussian peak of ``d_max`` at ``center`` falling to ``d_min``."""
    sigma = sigma or 0.25 * min(env.extent)
    c = env.centers - np.asarray(center, dtype=float)
    g = np.exp(-np.sum(c**2, axis=-1) / (2 * sigma**2))
    return d_min + (d_max - d_min) * g


def compute_workload_map(env: Environment, phi, decay, zstar) -> WorkloadMap:
    """``lambda = phi * (1 - d) * zstar`` on free cells, with its integral."""
    free = env.free
    phi, decay, zstar = (np.broadcast_to(np.asarray(a, dtype=float), free.shape) for a in (phi, decay, zstar))
    if np.any(phi[free] <= 0) or np.any(phi[free] > 1):
        raise ValueError("importance must lie in (0, 1] on free cells")
    if np.any(decay[free] <= 0) or np.any(decay[free] >= 1):
        raise ValueError("decay must lie in (0, 1) on free cells")
    if np.any(zstar[free] <= 0):
        raise ValueError("coverage objective must be positive on free cells")
    lam = np.where(free, phi * (1.0 - decay) * zstar, 0.0)
    total = float(lam.sum() * env.cell_area)
    if not total > 0:
        raise ValueError("total workload vanishes")
    return WorkloadMap(lam, total)


# ---------------------------------------------------------------------------
# diagram
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerDiagram:
    generators: np.ndarray  # (N, 2)
    weights: np.ndarray  # (N,) m^2
    labels: np.ndarray  # (H, W), -1 for obstacles / unreachable
    workloads: np.ndarray  # (N,) percent of reachable workload
    capabilities: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return len(self.weights)

    def spread(self) -> float:
        return workload_spread(self.workloads, self.capabilities)

    def deviation(self) -> float:
        """Largest distance (percentage points) of a workload from its equitable share."""
        c = np.asarray(self.capabilities, dtype=float)
        return float(np.abs(self.workloads - 100.0 * c / c.sum()).max())

    def is_equitable(self, tolerance: float = CONVERGENCE_SPREAD) -> bool:
        """Spread below ``tolerance`` and every share within half of it of its target."""
        return self.spread() < tolerance and self.deviation() <= 0.5 * tolerance

    def imbalance(self) -> float:
        return max(self.spread(), 2.0 * self.deviation())


def workload_spread(workloads: np.ndarray, capabilities: np.ndarray | None = None) -> float:
    """Max minus min of capability-normalised workloads (percentage points).

    With unit capabilities this is the plain workload spread.
    """
    workloads = np.asarray(workloads, dtype=float)
    if capabilities is None:
        capabilities = np.ones_like(workloads)
    c = np.asarray(capabilities, dtype=float)
    scaled = workloads * c.mean() / c
    return float(scaled.max() - scaled.min())


def assign_partitions(env: Environment, generators, weights, fields: list[GeodesicField]) -> np.ndarray:
    """Label every reachable free cell with ``argmin_i d_g(q, g_i)^2 - w_i``.

    Exact ties go to the lowest robot index. Unreachable cells get -1.
    """
    generators = np.asarray(generators, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float)
    if len(fields) != len(generators) or len(weights) != len(generators):
        raise ValueError("need one field and one weight per generator")
    cells = [env.cell_of(g) for g in generators]
    for g, c in zip(generators, cells):
        if not env.in_bounds(c) or not env.free[c]:
            raise ValueError(f"generator {tuple(g)} lies in an obstacle")
    if len({tuple(np.round(g, 12)) for g in generators}) != len(generators):
        raise ValueError("generators must be pairwise distinct")
    power = np.stack([f.length**2 - w for f, w in zip(fields, weights)])
    labels = np.argmin(power, axis=0)
    reach = np.isfinite(power.min(axis=0)) & env.free
    return np.where(reach, labels, -1)


def partition_workloads(labels: np.ndarray, wmap: WorkloadMap, n: int) -> np.ndarray:
    """Workload of each partition as a fraction of the reachable workload."""
    mask = labels >= 0
    sums = np.bincount(labels[mask], weights=wmap.lam[mask], minlength=n)
    total = sums.sum()
    return sums / total if total > 0 else sums


def subcell_workloads(env: Environment, labels: np.ndarray, weights, fields: list[GeodesicField],
                      wmap: WorkloadMap, samples: int = 8) -> np.ndarray:
    """Partition workload fractions with boundary cells split between robots.

    Cells away from any boundary count whole; a cell touching another label
    (8-adjacency) is divided by the share of its ``samples x samples`` interior
    points each robot wins, distances taken through the cell's anchor. This
    keeps the cost continuous in the weights and generators, which the
    gradient factors rely on near equity.
    """
    n = len(fields)
    weights = np.asarray(weights, dtype=float)
    reach = labels >= 0
    padded = np.pad(labels, 1, constant_values=-1)
    mixed = np.zeros_like(reach)
    h, w = labels.shape
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            other = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            mixed |= (other >= 0) & (other != labels)
    mixed &= reach
    plain = reach & ~mixed
    loads = np.bincount(labels[plain], weights=wmap.lam[plain], minlength=n).astype(float)
    ii, jj = np.nonzero(mixed)
    if ii.size:
        offs = ((np.arange(samples) + 0.5) / samples - 0.5) * env.resolution
        ox, oy = np.meshgrid(offs, offs)
        sub = np.stack([ox.ravel(), oy.ravel()], axis=1)
        pts = env.centers[ii, jj][:, None, :] + sub[None, :, :]
        power = np.stack([f.distance_at(pts) ** 2 - wk for f, wk in zip(fields, weights)])
        win = np.argmin(power, axis=0)
        lam = wmap.lam[ii, jj]
        for k in range(n):
            loads[k] += float((lam * (win == k).mean(axis=1)).sum())
    total = loads.sum()
    return loads / total if total > 0 else loads


# ---------------------------------------------------------------------------
# boundaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryPair:
    """Cells along the boundary between partitions ``i < j``.

    ``cells`` are the flat indices of cells of either label that touch the other
    label (8-adjacency). ``h_pairs``/``v_pairs`` are the (left, right) and
    (below, above) 4-adjacent cell pairs straddling the boundary; they carry
    the line-integral quadrature.
    """

    i: int
    j: int
    cells: np.ndarray
    h_pairs: np.ndarray  # (K, 2)
    v_pairs: np.ndarray  # (K, 2)


@dataclass(frozen=True)
class BoundarySet:
    n: int
    pairs: dict

    def get(self, i: int, j: int) -> BoundaryPair | None:
        return self.pairs.get((min(i, j), max(i, j)))

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.pairs:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def cells(self, i: int, j: int) -> np.ndarray:
        p = self.get(i, j)
        return np.empty(0, dtype=np.int64) if p is None else p.cells


def _crossings(labels: np.ndarray, axis: int):
    w = labels.shape[1]
    if axis == 1:
        a, b = labels[:, :-1], labels[:, 1:]
        ii, jj = np.nonzero((a != b) & (a >= 0) & (b >= 0))
        first = ii * w + jj
        second = first + 1
    else:
        a, b = labels[:-1, :], labels[1:, :]
        ii, jj = np.nonzero((a != b) & (a >= 0) & (b >= 0))
        first = ii * w + jj
        second = first + w
    return first, second


def extract_boundaries(labels: np.ndarray, env: Environment | None = None) -> BoundarySet:
    """All inter-partition boundaries of a labelling.

    Cells next to obstacles or the map frame only are not boundary cells.
    """
    flat = labels.reshape(-1)
    n = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    h, w = labels.shape
    pairs: dict = {}

    def key(a, b):
        la, lb = flat[a], flat[b]
        return np.minimum(la, lb), np.maximum(la, lb)

    hp = _crossings(labels, axis=1)
    vp = _crossings(labels, axis=0)
    # 8-adjacent touching cells (diagonals included) for the cell sets
    padded = np.pad(labels, 1, constant_values=-1)
    touch: dict = {}
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            other = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            ii, jj = np.nonzero((labels >= 0) & (other >= 0) & (labels != other))
            if ii.size == 0:
                continue
            la = labels[ii, jj]
            lb = other[ii, jj]
            for a, b, c in zip(la, lb, ii * w + jj):
                touch.setdefault((min(a, b), max(a, b)), set()).add(int(c))
    for (a, b), cells in touch.items():
        pairs[(int(a), int(b))] = None
    result = {}
    for k in pairs:
        lo, hi = k
        hsel = np.empty((0, 2), dtype=np.int64)
        vsel = np.empty((0, 2), dtype=np.int64)
        if hp[0].size:
            ka, kb = key(*hp)
            m = (ka == lo) & (kb == hi)
            hsel = np.stack([hp[0][m], hp[1][m]], axis=1)
        if vp[0].size:
            ka, kb = key(*vp)
            m = (ka == lo) & (kb == hi)
            vsel = np.stack([vp[0][m], vp[1][m]], axis=1)
        result[k] = BoundaryPair(lo, hi, np.array(sorted(touch[k]), dtype=np.int64), hsel, vsel)
    return BoundarySet(n, result)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldDerivatives:
    """Per-cell geometric terms of one generator's geodesic field.

    ``grad_sq`` is the gradient of ``d_g(q, g)^2`` with respect to ``q``
    (``2 d_g u`` with ``u`` the unit vector from the first waypoint to ``q``);
    ``dgen`` is minus the gradient with respect to ``g`` (``2 d_g t`` with ``t``
    the unit vector from ``g`` to the last waypoint); ``sq`` is ``d_g^2``
    (``inf`` where unreachable) on the (H, W) grid.
    """

    grad_sq: np.ndarray  # (H*W, 2)
    dgen: np.ndarray  # (H*W, 2)
    sq: np.ndarray  # (H, W)


def field_derivatives(fld: GeodesicField) -> FieldDerivatives:
    env = fld.env
    q = env.centers.reshape(-1, 2)
    length = fld.length.reshape(-1)
    anchor = fld.anchor.reshape(-1)
    tail = fld.tail.reshape(-1)
    ok = anchor >= SOURCE
    h1 = fld.points_of(np.where(ok, anchor, SOURCE))
    u = q - h1
    nu = np.linalg.norm(u, axis=1)
    u = np.divide(u, nu[:, None], out=np.zeros_like(u), where=nu[:, None] > 0)
    # last waypoint before the source; the cell itself when the path is direct
    hl = np.where((tail >= 0)[:, None], fld.points_of(np.maximum(tail, SOURCE)), q)
    t = hl - fld.source
    nt = np.linalg.norm(t, axis=1)
    t = np.divide(t, nt[:, None], out=np.zeros_like(t), where=nt[:, None] > 0)
    lfin = np.where(ok, length, 0.0)[:, None]
    return FieldDerivatives(2.0 * lfin * u, 2.0 * lfin * t, fld.length**2)


def boundary_normal_norm(q_idx, i: int, j: int, derivs: list[FieldDerivatives]) -> np.ndarray:
    """``|| 2 d_i u_i - 2 d_j u_j ||`` at boundary cells, clamped below by ``NORMAL_EPS``."""
    q_idx = np.asarray(q_idx)
    n = derivs[i].grad_sq[q_idx] - derivs[j].grad_sq[q_idx]
    return np.maximum(np.linalg.norm(n, axis=-1), NORMAL_EPS)


def normal_norm_from_directions(d_i: float, u_i, d_j: float, u_j) -> float:
    """Same quantity from explicit distances and first-hop unit vectors."""
    n = 2.0 * d_i * np.asarray(u_i, float) - 2.0 * d_j * np.asarray(u_j, float)
    return max(float(np.linalg.norm(n)), NORMAL_EPS)


@dataclass(frozen=True)
class BoundaryIntegrals:
    """Line integrals along one boundary, as seen from robot ``i``.

    ``weight`` is the integral of ``lambda / ||n'||``; ``generator`` is the
    integral of ``lambda * 2 d_i t_i / ||n'||`` (a 2-vector).
    """

    weight: float
    generator: np.ndarray


def boundary_integrals(pair: BoundaryPair, i: int, derivs: list[FieldDerivatives],
                       density: np.ndarray, res: float, weights=None) -> BoundaryIntegrals:
    """Line integrals over the boundary between ``i`` and its neighbor in ``pair``.

    Each boundary cell linearises the power difference about its center (the
    cell's own distance and first-hop direction) and contributes the piece of
    the zero line that falls inside the cell. A cell on the far side of a
    crease in a distance field places its zero line outside itself and adds
    nothing, so the integral follows the side the boundary actually lies on.
    """
    j = pair.j if pair.i == i else pair.i
    cells = pair.cells
    if cells.size == 0:
        return BoundaryIntegrals(0.0, np.zeros(2))
    dw = 0.0 if weights is None else float(weights[i] - weights[j])
    value = derivs[i].sq.reshape(-1)[cells] - derivs[j].sq.reshape(-1)[cells] - dw
    nvec = derivs[i].grad_sq[cells] - derivs[j].grad_sq[cells]
    ok = np.isfinite(value)
    value = np.where(ok, value, np.inf)
    v = np.where(ok, value, 0.0)
    nn2 = np.maximum(np.sum(nvec**2, axis=1), NORMAL_EPS**2)
    p0 = -v[:, None] * nvec / nn2[:, None]
    t = np.stack([-nvec[:, 1], nvec[:, 0]], axis=1) / np.sqrt(nn2)[:, None]
    lo, hi = _clip_to_square(p0, t, 0.5 * res)
    seg = np.where(ok, np.maximum(hi - lo, 0.0), 0.0)
    nn = np.maximum(np.linalg.norm(nvec, axis=1), NORMAL_EPS)
    term = density.reshape(-1)[cells] * seg / nn
    return BoundaryIntegrals(float(term.sum()), (term[:, None] * derivs[i].dgen[cells]).sum(axis=0))


def boundary_band(labels: np.ndarray) -> np.ndarray:
    """Reachable cells within one cell of a label change (8-adjacency), dilated once."""
    h, w = labels.shape
    reach = labels >= 0
    padded = np.pad(labels, 1, constant_values=-1)
    mixed = np.zeros_like(reach)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            other = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            mixed |= (other >= 0) & (other != labels)
    mixed &= reach
    return ndimage.binary_dilation(mixed, structure=_EIGHT) & reach


def all_boundary_integrals(labels: np.ndarray, weights, derivs: list[FieldDerivatives],
                           density: np.ndarray, res: float) -> dict:
    """Boundary integrals for every robot pair at once.

    Every cell of the boundary band linearises all robots' powers about its
    center. For a pair ``(i, j)`` the zero line of ``P_i - P_j`` is clipped to
    the cell and then to where both ``i`` and ``j`` beat every other robot, so
    boundaries near junctions are attributed to the right pair even when the
    cell-center labels do not show it. Returns ``{(i, j): (weight, gen_i, gen_j)}``
    for ``i < j`` with a non-empty boundary; ``gen_k`` integrates
    ``lambda * 2 d_k t_k / ||n'||``.
    """
    n = len(derivs)
    weights = np.asarray(weights, dtype=float)
    cells = np.flatnonzero(boundary_band(labels))
    out: dict = {}
    if cells.size == 0 or n < 2:
        return out
    power = np.stack([d.sq.reshape(-1)[cells] - wk for d, wk in zip(derivs, weights)])
    grad = np.stack([d.grad_sq[cells] for d in derivs])
    dens = density.reshape(-1)[cells]
    half = 0.5 * res
    for i in range(n):
        for j in range(i + 1, n):
            value = power[i] - power[j]
            nvec = grad[i] - grad[j]
            ok = np.isfinite(value)
            if not ok.any():
                continue
            v = np.where(ok, value, 0.0)
            nn2 = np.maximum(np.sum(nvec**2, axis=1), NORMAL_EPS**2)
            p0 = -v[:, None] * nvec / nn2[:, None]
            t = np.stack([-nvec[:, 1], nvec[:, 0]], axis=1) / np.sqrt(nn2)[:, None]
            lo, hi = _clip_to_square(p0, t, half)
            # both i and j must beat every other robot along the segment
            for k in range(n):
                if k in (i, j):
                    continue
                alpha = power[k] - power[i]
                m = grad[k] - grad[i]
                fin = np.isfinite(alpha)
                alpha = np.where(fin, alpha, 1.0)
                m = np.where(fin[:, None], m, 0.0)
                a0 = alpha + np.sum(m * p0, axis=1)
                b0 = np.sum(m * t, axis=1)
                lo, hi = _clip_halfline(a0, b0, lo, hi)
            seg = np.where(ok, np.maximum(hi - lo, 0.0), 0.0)
            if not np.any(seg > 0):
                continue
            term = dens * seg / np.sqrt(nn2)
            out[(i, j)] = (float(term.sum()),
                           (term[:, None] * derivs[i].dgen[cells]).sum(axis=0),
                           (term[:, None] * derivs[j].dgen[cells]).sum(axis=0))
    return out


def _clip_to_square(p0: np.ndarray, t: np.ndarray, half: float):
    lo = np.full(len(p0), -np.inf)
    hi = np.full(len(p0), np.inf)
    for k in range(2):
        tk = t[:, k]
        moving = np.abs(tk) > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            s1 = np.where(moving, (-half - p0[:, k]) / tk, -np.inf)
            s2 = np.where(moving, (half - p0[:, k]) / tk, np.inf)
        lo = np.maximum(lo, np.minimum(s1, s2))
        hi = np.minimum(hi, np.maximum(s1, s2))
        hi = np.where(~moving & (np.abs(p0[:, k]) > half), -np.inf, hi)
    return lo, hi


def _clip_halfline(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Intersect ``[lo, hi]`` with ``{s : a + b s >= 0}``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.where(b != 0, -a / b, 0.0)
    lo = np.where(b > 0, np.maximum(lo, root), lo)
    hi = np.where(b < 0, np.minimum(hi, root), hi)
    hi = np.where((b == 0) & (a < 0), -np.inf, hi)
    return lo, hi


@dataclass(frozen=True)
class NeighborView:
    """Everything robot ``i`` needs for its own gradient: its workload, its
    neighbors' workloads and the shared boundary integrals."""

    i: int
    workload: float
    capability: float
    neighbor_workloads: dict
    neighbor_capabilities: dict
    integrals: dict  # j -> BoundaryIntegrals


def local_gradients(view: NeighborView) -> tuple[float, np.ndarray]:
    """Per-robot ``(dH/dw_i, dH/dg_i)`` computed from a neighbor view."""
    own = view.capability**2 / max(view.workload, WORKLOAD_CLAMP) ** 2
    gw = 0.0
    gg = np.zeros(2)
    for j, integ in view.integrals.items():
        lam_j = max(view.neighbor_workloads[j], WORKLOAD_CLAMP)
        factor = view.neighbor_capabilities[j] ** 2 / lam_j**2 - own
        gw += factor * integ.weight
        gg += factor * integ.generator
    return gw, gg


def build_views(diagram: PowerDiagram, boundaries: BoundarySet, derivs: list[FieldDerivatives],
                wmap: WorkloadMap, env: Environment, fractions=None) -> list[NeighborView]:
    """Neighbor views; ``fractions`` overrides the diagram's cell-count workloads.

    Neighbors are the robots sharing a boundary of non-zero length, which can
    include pairs whose cells never touch at cell-center resolution.
    """
    frac = diagram.workloads / 100.0 if fractions is None else np.asarray(fractions, dtype=float)
    integrals = all_boundary_integrals(diagram.labels, diagram.weights, derivs, wmap.density,
                                       env.resolution)
    per_robot: list[dict] = [dict() for _ in range(diagram.n)]
    for (i, j), (wint, gi, gj) in integrals.items():
        per_robot[i][j] = BoundaryIntegrals(wint, gi)
        per_robot[j][i] = BoundaryIntegrals(wint, gj)
    views = []
    for i in range(diagram.n):
        integ = dict(sorted(per_robot[i].items()))
        views.append(NeighborView(
            i, float(frac[i]), float(diagram.capabilities[i]),
            {j: float(frac[j]) for j in integ},
            {j: float(diagram.capabilities[j]) for j in integ},
            integ,
        ))
    return views


def _check_degenerate(diagram: PowerDiagram, i: int, boundaries: BoundarySet) -> None:
    for k in [i, *boundaries.neighbors(i)]:
        if diagram.workloads[k] / 100.0 < WORKLOAD_CLAMP:
            raise DegeneratePartitionError(f"partition {k} carries no workload")


def grad_H_weight(i: int, diagram: PowerDiagram, boundaries: BoundarySet, wmap: WorkloadMap,
                  derivs: list[FieldDerivatives], env: Environment) -> float:
    """``dH/dw_i`` for the capability-weighted equity cost."""
    _check_degenerate(diagram, i, boundaries)
    return local_gradients(build_views(diagram, boundaries, derivs, wmap, env)[i])[0]


def grad_H_generator(i: int, diagram: PowerDiagram, boundaries: BoundarySet, wmap: WorkloadMap,
                     derivs: list[FieldDerivatives], env: Environment) -> np.ndarray:
    """``dH/dg_i`` (x, y) for the capability-weighted equity cost."""
    _check_degenerate(diagram, i, boundaries)
    return local_gradients(build_views(diagram, boundaries, derivs, wmap, env)[i])[1]


def equity_cost(workloads_frac, capabilities=None) -> float:
    lam = np.maximum(np.asarray(workloads_frac, dtype=float), WORKLOAD_CLAMP)
    c = np.ones_like(lam) if capabilities is None else np.asarray(capabilities, dtype=float)
    return float(np.sum(c**2 / lam))


# ---------------------------------------------------------------------------
# generator motion helpers
# ---------------------------------------------------------------------------

def f_sat(x: float, k_sat: float = 3.0) -> float:
    """Smooth gate: 0 for ``x <= 0``, ``exp(-1/(k_sat x)^2)`` above."""
    if k_sat <= 0:
        raise ValueError("k_sat must be positive")
    if not x > 0:
        return 0.0
    return math.exp(-1.0 / (k_sat * x) ** 2)


def components(labels: np.ndarray, i: int) -> tuple[np.ndarray, int]:
    """4-connected components of partition ``i``."""
    return ndimage.label(labels == i, structure=_FOUR)


def largest_component(labels: np.ndarray, i: int, lam: np.ndarray) -> np.ndarray:
    """Mask of the component of partition ``i`` with the largest workload."""
    comp, k = components(labels, i)
    if k == 0:
        raise DegeneratePartitionError(f"partition {i} is empty")
    loads = ndimage.sum_labels(lam, comp, index=np.arange(1, k + 1))
    # ties: the larger area, then the lowest component number
    areas = ndimage.sum_labels(np.ones_like(lam), comp, index=np.arange(1, k + 1))
    best = max(range(k), key=lambda m: (loads[m], areas[m], -m))
    return comp == best + 1


def largest_component_centroid(labels: np.ndarray, i: int, wmap: WorkloadMap, env: Environment) -> np.ndarray:
    """Workload-weighted centroid of the heaviest component of partition ``i``.

    When the centroid falls outside that component it is replaced by the
    nearest cell center of the component.
    """
    mask = largest_component(labels, i, wmap.lam)
    wts = wmap.lam[mask]
    pts = env.centers[mask]
    if wts.sum() > 0:
        c = (pts * wts[:, None]).sum(axis=0) / wts.sum()
    else:
        c = pts.mean(axis=0)
    cell = env.cell_of(c)
    if env.in_bounds(cell) and mask[cell]:
        return c
    return env.center_of(env.nearest_free_cell(c, mask))


def geodesic_direction(fld: GeodesicField, target) -> np.ndarray | None:
    """Unit direction, at the field's source, of the geodesic toward ``target``."""
    env = fld.env
    target = np.asarray(target, dtype=float)
    cell = env.cell_of(target)
    if not env.in_bounds(cell) or not np.isfinite(fld.length[cell]):
        return None
    if line_of_sight(env, fld.source, target):
        v = target - fld.source
    else:
        v = fld.point_of(int(fld.tail[cell])) - fld.source if fld.tail[cell] >= 0 else target - fld.source
    n = np.linalg.norm(v)
    return None if n == 0 else v / n


# ---------------------------------------------------------------------------
# gains and control steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainSchedule:
    """Four weight gains selected by gradient magnitude bands.

    ``thresholds`` are ``(b1, b2, b3)`` with ``b1 > b2 > b3 > 0``; ``gains``
    ``(k1, k2, k3, k4)`` apply to ``|g| > b1``, ``b2 <= |g| <= b1``,
    ``b3 <= |g| < b2`` and ``|g| < b3``.
    """

    gains: tuple = (5.0, 100.0, 500.0, 5000.0)
    thresholds: tuple = (5e-3, 2e-4, 1e-5)

    def __post_init__(self):
        if len(self.gains) != 4 or len(self.thresholds) != 3:
            raise ValueError("need 4 gains and 3 thresholds")
        b1, b2, b3 = self.thresholds
        if not b1 > b2 > b3 > 0:
            raise ValueError("thresholds must be strictly decreasing and positive")
        if any(g <= 0 for g in self.gains) or list(self.gains) != sorted(self.gains):
            raise ValueError("gains must be positive and non-decreasing")

    def __call__(self, magnitude: float) -> float:
        return gain_schedule(magnitude, self)


# constants of the four benchmark families (weight gains, thresholds, generator gain)
TABLE_GAINS = {
    "open_rooms": (GainSchedule((5, 100, 500, 5000), (5e-3, 3e-4, 1e-5)), 5.0),
    "rooms": (GainSchedule((5, 100, 500, 5000), (5e-3, 2e-4, 1e-5)), 5.0),
    "spiral": (GainSchedule((15, 75, 375, 1500), (5e-3, 5e-4, 5e-5)), 2.0),
    "maze": (GainSchedule((15, 150, 1500, 15000), (1e-2, 1e-3, 1e-4)), 0.1),
}


def gain_schedule(magnitude: float, bands: GainSchedule) -> float:
    b1, b2, b3 = bands.thresholds
    k1, k2, k3, k4 = bands.gains
    g = abs(magnitude)
    if g > b1:
        return k1
    if g >= b2:
        return k2
    if g >= b3:
        return k3
    return k4


@dataclass
class PartitionContext:
    """Mutable working state shared by the step functions."""

    env: Environment
    wmap: WorkloadMap
    generators: np.ndarray
    weights: np.ndarray
    capabilities: np.ndarray
    fields: list
    derivs: list
    diagram: PowerDiagram = None
    boundaries: BoundarySet = None
    fractions: np.ndarray = None  # sub-cell workload fractions used by the gradients
    step_scale: float = 1.0  # backtracking multiplier of the last weight step

    @classmethod
    def create(cls, env, wmap, generators, weights=None, capabilities=None):
        generators = np.array(generators, dtype=float).reshape(-1, 2)
        n = len(generators)
        weights = np.zeros(n) if weights is None else np.array(weights, dtype=float)
        capabilities = np.ones(n) if capabilities is None else np.array(capabilities, dtype=float)
        if np.any(capabilities <= 0):
            raise ValueError("capabilities must be positive")
        fields = [geodesic_field(env, g) for g in generators]
        ctx = cls(env, wmap, generators, weights, capabilities, fields, [field_derivatives(f) for f in fields])
        ctx.refresh()
        return ctx

    def refresh(self) -> None:
        labels = assign_partitions(self.env, self.generators, self.weights, self.fields)
        loads = 100.0 * partition_workloads(labels, self.wmap, len(self.weights))
        self.diagram = PowerDiagram(self.generators.copy(), self.weights.copy(), labels, loads,
                                    self.capabilities.copy())
        self.boundaries = extract_boundaries(labels, self.env)
        self.fractions = subcell_workloads(self.env, labels, self.weights, self.fields, self.wmap)

    def move_generator(self, i: int, point) -> None:
        self.generators[i] = point
        self.fields[i] = geodesic_field(self.env, point)
        self.derivs[i] = field_derivatives(self.fields[i])

    @property
    def control_scale(self) -> float:
        """Factor turning ``dH/dw`` with fractional workloads into the percent-workload gradient."""
        return 0.01

    def weight_step(self, schedule: GainSchedule, gw: np.ndarray, dt: float):
        """Gains and new weights for the weight law.

        Gains are selected on, and multiply, the gradient of the cost written
        with workloads in percent; weights stay in m^2.  A robot whose
        partition is empty has no boundary and hence no gradient, so its
        weight is instead raised just enough to win back its generator cell.
        """
        g = gw * self.control_scale
        gains = np.array([schedule(x) for x in g])
        delta = -dt * gains * g
        delta = self._backtrack(delta)
        new = self.weights + delta
        empty = self.diagram.workloads / 100.0 < WORKLOAD_CLAMP
        for i in np.nonzero(empty)[0]:
            cell = self.env.cell_of(self.generators[i])
            rival = max(self.weights[j] - self.fields[j].length[cell] ** 2
                        for j in range(len(new)) if j != i)
            new[i] = max(new[i], rival + self.env.resolution**2)
        return gains, new

    def trial_cost(self, weights) -> float:
        labels = assign_partitions(self.env, self.generators, weights, self.fields)
        return equity_cost(partition_workloads(labels, self.wmap, len(weights)), self.capabilities)

    def _backtrack(self, delta: np.ndarray) -> np.ndarray:
        """Halve a weight step until the equity cost does not increase.

        Two generators almost equidistant from a doorway can swap a whole room
        for a tiny weight change, which a fixed-gain Euler step overshoots
        forever. Every step starts from the full gain; if no trial decreases
        the cost (single cells flipping at ties) the smallest trial is taken.
        """
        base = equity_cost(self.diagram.workloads / 100.0, self.capabilities)
        scale = 1.0
        for _ in range(BACKTRACK_TRIES - 1):
            if self.trial_cost(self.weights + scale * delta) <= base * (1 + 1e-12):
                break
            scale *= 0.5
        self.step_scale = scale
        return scale * delta

    def gradients(self):
        views = build_views(self.diagram, self.boundaries, self.derivs, self.wmap, self.env,
                            self.fractions)
        out = [local_gradients(v) for v in views]
        return np.array([g[0] for g in out]), np.array([g[1] for g in out])


@dataclass(frozen=True)
class StepResult:
    grad_w: np.ndarray
    grad_g: np.ndarray
    gains: np.ndarray
    fsat: np.ndarray
    degenerate: tuple


def step_W(ctx: PartitionContext, schedule: GainSchedule, dt: float = 1.0) -> StepResult:
    """One synchronous explicit-Euler step of the weight law."""
    gw, gg = ctx.gradients()
    degenerate = tuple(int(i) for i in np.nonzero(ctx.diagram.workloads / 100.0 < WORKLOAD_CLAMP)[0])
    gains, ctx.weights = ctx.weight_step(schedule, gw, dt)
    ctx.refresh()
    return StepResult(gw, gg, gains, np.zeros(len(gw)), degenerate)


def step_WG(ctx: PartitionContext, schedule: GainSchedule, k_g: float, k_sat: float = 3.0,
            dt: float = 1.0) -> StepResult:
    """Weight law plus gated generator motion toward the heaviest component's centroid."""
    gw, gg = ctx.gradients()
    degenerate = tuple(int(i) for i in np.nonzero(ctx.diagram.workloads / 100.0 < WORKLOAD_CLAMP)[0])
    gains, new_w = ctx.weight_step(schedule, gw, dt)
    labels = ctx.diagram.labels
    res = ctx.env.resolution
    fs = np.zeros(len(gw))
    moves = {}
    for i in range(len(gw)):
        if ctx.diagram.workloads[i] <= 0:
            continue
        target = largest_component_centroid(labels, i, ctx.wmap, ctx.env)
        to_target = target - ctx.generators[i]
        dist = np.linalg.norm(to_target)
        if dist == 0:
            continue
        fs[i] = f_sat(float(np.dot(to_target / dist, -gg[i])), k_sat)
        if fs[i] == 0:
            continue
        gamma = geodesic_direction(ctx.fields[i], target)
        if gamma is None:
            log.debug("robot %d: no geodesic toward its centroid, generator held", i)
            continue
        step = dt * k_g * fs[i]
        step = min(step, res, dist)
        moves[i] = ctx.generators[i] + step * gamma
    ctx.weights = new_w
    taken = {tuple(np.round(g, 9)) for g in ctx.generators}
    for i, p in moves.items():
        if not ctx.env.is_free_point(p):
            p = ctx.env.center_of(ctx.env.nearest_free_cell(p))
        key = tuple(np.round(p, 9))
        if key in taken:
            continue
        taken.discard(tuple(np.round(ctx.generators[i], 9)))
        taken.add(key)
        ctx.move_generator(i, p)
    ctx.refresh()
    return StepResult(gw, gg, gains, fs, degenerate)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

MODES = ("W", "WG", "voronoi")


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "W"
    n_robots: int = 5
    seed: int = 0
    max_iterations: int = 5000
    dt: float = 1.0
    schedule: GainSchedule = field(default_factory=GainSchedule)
    k_g: float = 5.0
    k_sat: float = 3.0
    capabilities: tuple | None = None
    robot_radius: float = 0.1
    tolerance: float = CONVERGENCE_SPREAD
    generators: tuple | None = None  # explicit start positions override the seed

    def __post_init__(self):
        mode = {"w": "W", "wg": "WG"}.get(self.mode.lower(), self.mode.lower() if self.mode.lower() == "voronoi" else self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_robots < 1 or self.max_iterations < 0 or self.dt <= 0:
            raise ValueError("invalid partition config")


@dataclass
class PartitionRunState:
    iterations: int = 0
    converged: bool = False
    status: str = "running"
    workloads: list = field(default_factory=list)  # per-iteration (N,) percent
    weights: list = field(default_factory=list)
    grad_w: list = field(default_factory=list)
    fsat: list = field(default_factory=list)
    generator_paths: list = field(default_factory=list)  # per robot list of points
    degenerate_events: int = 0


def random_generators(env: Environment, n: int, seed: int, robot_radius: float = 0.1,
                      min_separation: float | None = None) -> np.ndarray:
    """Distinct random cell centers in the robot-eroded free space (single component).

    Starts are drawn sequentially and redrawn while closer than
    ``min_separation`` (default: a tenth of the map diagonal) to an earlier
    one; the bound is relaxed geometrically if the map cannot host it.
    Generators almost on top of each other make the weight-only law stiff.
    """
    rng = np.random.default_rng(seed)
    space = erode_free_space(env, robot_radius)
    comp, k = ndimage.label(space, structure=_EIGHT)
    if k > 1:
        sizes = ndimage.sum_labels(space, comp, index=np.arange(1, k + 1))
        space = comp == int(np.argmax(sizes)) + 1
    ii, jj = np.nonzero(space)
    if ii.size < n:
        raise ValueError("not enough free cells for the requested robots")
    pts = env.centers[ii, jj]
    if min_separation is None:
        min_separation = 0.1 * float(np.hypot(*env.extent))
    sep = min_separation
    while True:
        chosen: list[int] = []
        for _ in range(200 * n):
            if len(chosen) == n:
                break
            c = int(rng.integers(pts.shape[0]))
            if all(np.linalg.norm(pts[c] - pts[o]) >= max(sep, 1e-12) for o in chosen):
                chosen.append(c)
        if len(chosen) == n:
            return pts[chosen]
        sep *= 0.5


def run_partitioning(env: Environment, wmap: WorkloadMap, config: PartitionConfig,
                     callback=None) -> tuple[PowerDiagram, PartitionRunState]:
    """Iterate the chosen control law until the workload spread drops below tolerance.

    Never raises on non-convergence: the returned state carries
    ``status == "max_iterations"`` and the diagram is the best one seen.
    """
    if config.generators is not None:
        gens = np.asarray(config.generators, dtype=float).reshape(-1, 2)
    else:
        gens = random_generators(env, config.n_robots, config.seed, config.robot_radius)
    ctx = PartitionContext.create(env, wmap, gens, capabilities=config.capabilities)
    n = len(gens)
    state = PartitionRunState(generator_paths=[[g.copy()] for g in gens])
    best = ctx.diagram

    def record(res: StepResult | None):
        d = ctx.diagram
        state.workloads.append(d.workloads.copy())
        state.weights.append(d.weights.copy())
        state.grad_w.append(np.zeros(n) if res is None else np.abs(res.grad_w))
        state.fsat.append(np.zeros(n) if res is None else res.fsat.copy())

    record(None)
    if ctx.diagram.is_equitable(config.tolerance) or n == 1:
        state.converged, state.status = True, "converged"
        return ctx.diagram, state
    if config.mode == "voronoi":
        state.status = "voronoi"
        state.converged = ctx.diagram.is_equitable(config.tolerance)
        return ctx.diagram, state
    for it in range(1, config.max_iterations + 1):
        if config.mode == "W":
            res = step_W(ctx, config.schedule, config.dt)
        else:
            res = step_WG(ctx, config.schedule, config.k_g, config.k_sat, config.dt)
            for i in range(n):
                if not np.array_equal(state.generator_paths[i][-1], ctx.generators[i]):
                    state.generator_paths[i].append(ctx.generators[i].copy())
        state.degenerate_events += bool(res.degenerate)
        state.iterations = it
        record(res)
        if callback is not None:
            callback(it, ctx, res)
        if ctx.diagram.imbalance() < best.imbalance():
            best = ctx.diagram
        if ctx.diagram.is_equitable(config.tolerance):
            state.converged, state.status = True, "converged"
            return ctx.diagram, state
    state.status = "max_iterations"
    return best, state


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionStats:
    components: list  # per partition component count
    relative_workload: list  # per partition, percent of its workload in the heaviest component

    @property
    def disconnected(self) -> int:
        return sum(1 for c in self.components if c > 1)


def partition_stats(diagram: PowerDiagram, wmap: WorkloadMap) -> PartitionStats:
    comps, rel = [], []
    for i in range(diagram.n):
        comp, k = components(diagram.labels, i)
        comps.append(int(k))
        if k == 0:
            rel.append(0.0)
            continue
        loads = ndimage.sum_labels(wmap.lam, comp, index=np.arange(1, k + 1))
        rel.append(float(100.0 * loads.max() / loads.sum()) if loads.sum() > 0 else 100.0)
    return PartitionStats(comps, rel)


def partitions_stats(diagrams, wmaps) -> list[PartitionStats]:
    """:func:`partition_stats` over a batch of completed runs."""
    if isinstance(wmaps, WorkloadMap):
        wmaps = [wmaps] * len(diagrams)
    return [partition_stats(d, w) for d, w in zip(diagrams, wmaps)]


def voronoi_baseline(env: Environment, wmap: WorkloadMap, generators) -> PowerDiagram:
    """Geodesic Voronoi diagram: every weight frozen at zero."""
    ctx = PartitionContext.create(env, wmap, generators)
    return ctx.diagram


def with_capabilities(diagram: PowerDiagram, capabilities) -> PowerDiagram:
    return replace(diagram, capabilities=np.asarray(capabilities, dtype=float))
