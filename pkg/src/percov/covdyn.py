"""Decaying coverage field, coverage actions and error metrics.

The field lives on the free cells of an environment. Robots apply a disk
footprint scaled by a per-robot gain ``rho`` that aims at bringing the
footprint back to the objective without overshooting it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .environment import Environment, write_pgm

# normalisations of the per-cell error: e / Z* (default) or e / Z*^2
NORMALIZATIONS = ("objective", "squared")


def uniform_disk(radius: float, value: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Footprint ``alpha(dist)``: ``value`` inside the closed disk, 0 outside."""

    def alpha(dist: np.ndarray) -> np.ndarray:
        return np.where(dist <= radius, value, 0.0)

    return alpha


@dataclass(frozen=True)
class RobotModel:
    id: int = 0
    body_radius: float = 0.1
    coverage_radius: float = 0.2
    speed: float = 0.1  # meters per step
    rho_max: float = 1.0
    production: Callable | None = None  # alpha(distance) -> coverage per step

    def __post_init__(self):
        if self.body_radius < 0 or self.coverage_radius <= 0 or self.speed <= 0 or self.rho_max < 0:
            raise ValueError("invalid robot model")
        if self.production is None:
            object.__setattr__(self, "production", uniform_disk(self.coverage_radius))

    def footprint(self, env: Environment, position) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cells (rows, cols) and production values of the footprint centered at ``position``."""
        p = np.asarray(position, dtype=float)
        r = self.coverage_radius
        i0, j0 = env.cell_of(p - r)
        i1, j1 = env.cell_of(p + r)
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, env.height - 1), min(j1, env.width - 1)
        if i1 < i0 or j1 < j0:
            empty = np.zeros(0, dtype=int)
            return empty, empty, np.zeros(0)
        ii, jj = np.mgrid[i0:i1 + 1, j0:j1 + 1]
        ii, jj = ii.ravel(), jj.ravel()
        dist = np.linalg.norm(env.centers[ii, jj] - p, axis=1)
        alpha = np.asarray(self.production(dist), dtype=float)
        alpha = np.where(dist <= r, alpha, 0.0)
        keep = (alpha > 0) & env.free[ii, jj]
        return ii[keep], jj[keep], alpha[keep]


@dataclass
class CoverageField:
    env: Environment
    zstar: np.ndarray
    phi: np.ndarray
    decay: np.ndarray
    z: np.ndarray = None
    visits: np.ndarray = None
    k: int = 0

    def __post_init__(self):
        shape = self.env.free.shape
        self.zstar = np.broadcast_to(np.asarray(self.zstar, dtype=float), shape).copy()
        self.phi = np.broadcast_to(np.asarray(self.phi, dtype=float), shape).copy()
        self.decay = np.broadcast_to(np.asarray(self.decay, dtype=float), shape).copy()
        free = self.env.free
        if np.any(self.zstar[free] <= 0):
            raise ValueError("objective must be positive on free cells")
        if np.any(self.phi[free] <= 0) or np.any(self.phi[free] > 1):
            raise ValueError("importance must lie in (0, 1]")
        if np.any(self.decay[free] <= 0) or np.any(self.decay[free] >= 1):
            raise ValueError("decay must lie in (0, 1)")
        self.z = np.zeros(shape) if self.z is None else np.broadcast_to(np.asarray(self.z, dtype=float), shape).copy()
        if np.any(self.z < 0):
            raise ValueError("coverage must be non-negative")
        self.visits = np.zeros(shape, dtype=np.int64) if self.visits is None else self.visits.copy()
        for a in (self.zstar, self.phi, self.decay, self.z):
            a[~free] = 0.0

    def copy(self) -> "CoverageField":
        return CoverageField(self.env, self.zstar, self.phi, self.decay, self.z, self.visits, self.k)


def compute_rho(robot: RobotModel, position, fld: CoverageField) -> float:
    """Coverage gain for the next action, clamped to ``[0, rho_max]``.

    Returns 0 when the footprint covers no free cell.
    """
    ii, jj, alpha = robot.footprint(fld.env, position)
    if ii.size == 0:
        return 0.0
    phi = fld.phi[ii, jj]
    den = float(np.sum(phi * alpha**2))
    if den <= 0:
        return 0.0
    num = float(np.sum(phi * (fld.zstar[ii, jj] - fld.decay[ii, jj] * fld.z[ii, jj]) * alpha))
    return float(np.clip(num / den, 0.0, robot.rho_max))


def apply_actions(fld: CoverageField, actions) -> CoverageField:
    """Advance one step in place: decay then add ``sum rho_i * alpha_i``.

    ``actions`` is an iterable of ``(robot, position, rho)``.
    """
    added = np.zeros_like(fld.z)
    for robot, position, rho in actions:
        if rho < 0:
            raise ValueError("rho must be non-negative")
        ii, jj, alpha = robot.footprint(fld.env, position)
        np.add.at(added, (ii, jj), rho * alpha)
    fld.z = fld.decay * fld.z + added
    fld.visits += added > 0
    fld.k += 1
    return fld


def coverage_error(fld: CoverageField) -> np.ndarray:
    """Per-cell error ``phi * (Z* - Z)``; 0 off free space."""
    e = fld.phi * (fld.zstar - fld.z)
    e[~fld.env.free] = 0.0
    return e


def quadratic_error(fld: CoverageField, labels: np.ndarray | None = None, n: int | None = None):
    """Integral of ``e^2`` over free space and, given labels, per partition.

    Returns ``(f, [f_1, ..., f_n])``; cells labelled ``-1`` only count in ``f``.
    """
    e2 = coverage_error(fld) ** 2 * fld.env.cell_area
    free = fld.env.free
    total = float(e2[free].sum())
    if labels is None:
        return total, []
    n = int(labels.max()) + 1 if n is None else n
    mask = free & (labels >= 0)
    parts = np.bincount(labels[mask], weights=e2[mask], minlength=n)
    return total, [float(v) for v in parts]


def normalized_error(fld: CoverageField, normalization: str = "objective") -> np.ndarray:
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    e = coverage_error(fld)
    out = np.zeros_like(e)
    free = fld.env.free
    power = 1 if normalization == "objective" else 2
    out[free] = e[free] / fld.zstar[free] ** power
    return out


@dataclass(frozen=True)
class Metrics:
    k: int
    mean_err: float
    std_err: float
    mean_cov: float
    std_cov: float
    per_partition: list = field(default_factory=list)

    def record(self) -> dict:
        return {"k": self.k, "mean_err": self.mean_err, "std_err": self.std_err,
                "mean_cov": self.mean_cov, "per_partition": list(self.per_partition)}


def metrics(fld: CoverageField, labels: np.ndarray | None = None, n: int | None = None,
            normalization: str = "objective") -> Metrics:
    """Mean / std of the normalised error and of the coverage level over free space.

    With labels, ``per_partition`` holds the mean normalised error of each partition.
    """
    free = fld.env.free
    eps = normalized_error(fld, normalization)[free]
    z = fld.z[free]
    per = []
    if labels is not None:
        n = int(labels.max()) + 1 if n is None else n
        lab = labels[free]
        eps_all = eps
        for i in range(n):
            sel = lab == i
            per.append(float(eps_all[sel].mean()) if sel.any() else 0.0)
    return Metrics(fld.k, float(eps.mean()), float(eps.std()), float(z.mean()), float(z.std()), per)


def objective_means(fld: CoverageField) -> tuple[float, float]:
    """Mean objective and mean importance-weighted objective over free space."""
    free = fld.env.free
    return float(fld.zstar[free].mean()), float((fld.phi * fld.zstar)[free].mean())


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_metrics_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.record() if isinstance(r, Metrics) else r) + "\n")


def export_field_pgm(fld: CoverageField, path) -> None:
    """Coverage level scaled so the largest objective maps to 255 (saturating above)."""
    top = float(fld.zstar.max())
    gray = np.where(fld.env.free, np.clip(fld.z / top, 0, 1) * 255, 0)
    write_pgm(path, np.round(gray).astype(np.uint8))


def export_field_csv(fld: CoverageField, path) -> None:
    """Row-major coverage level, header ``width,height,resolution``."""
    env = fld.env
    with open(Path(path), "w") as fh:
        fh.write("width,height,resolution\n")
        fh.write(f"{env.width},{env.height},{env.resolution}\n")
        for row in fld.z:
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")
