"""Report figures written next to the CSV / JSON-lines artifacts (PNG, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .environment import Environment  # noqa: E402


def _extent(env: Environment):
    x0, y0 = env.origin
    w, h = env.extent
    return (x0, x0 + w, y0, y0 + h)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_partitions(env: Environment, labels, path, generators=None, generator_paths=None, graphs=None,
                    title: str | None = None) -> Path:
    """Labels as colors, obstacles black; optional generators, their trajectories and sweep graphs."""
    fig, ax = plt.subplots(figsize=(6, 5))
    img = np.where(labels >= 0, labels, np.nan).astype(float)
    ax.imshow(np.where(env.free, 1.0, 0.0), origin="lower", extent=_extent(env), cmap="gray", vmin=0, vmax=1)
    ax.imshow(img, origin="lower", extent=_extent(env), cmap="tab10", vmin=0, vmax=9, alpha=0.6,
              interpolation="nearest")
    for g in graphs or ():
        seg = g.vertices[g.edges]
        for a, b in seg:
            ax.plot([a[0], b[0]], [a[1], b[1]], color="k", lw=0.3)
    for p in generator_paths or ():
        p = np.asarray(p)
        ax.plot(p[:, 0], p[:, 1], "-", color="k", lw=0.8)
    if generators is not None:
        g = np.asarray(generators)
        ax.plot(g[:, 0], g[:, 1], "o", color="w", mec="k", ms=5)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_iterations(state, path, capabilities=None) -> Path:
    """Workload %, weight, |dH/dw| and saturation per robot against iteration."""
    wl = np.asarray(state.workloads)
    w = np.asarray(state.weights)
    gw = np.asarray(state.grad_w)
    fs = np.asarray(state.fsat)
    it = np.arange(len(wl))
    fig, axes = plt.subplots(4, 1, figsize=(7, 9), sharex=True)
    for ax, data, lab in zip(axes, (wl, w, gw, fs), ("workload [%]", "weight [m$^2$]", "|dH/dw|", "f_sat")):
        if data.size:
            ax.plot(it[:len(data)], data, lw=0.9)
        ax.set_ylabel(lab)
    if gw.size and np.any(gw > 0):
        axes[2].set_yscale("log")
    axes[-1].set_xlabel("iteration")
    return _save(fig, path)


def plot_coverage(records, path, objective_means=None) -> Path:
    """Mean/std of the normalised error and the mean coverage level against step."""
    k = np.array([r.k for r in records])
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    a1.plot(k, [r.mean_err for r in records], label="mean")
    a1.plot(k, [r.std_err for r in records], "--", label="std")
    a1.set_ylabel("normalised error")
    a1.legend()
    a2.plot(k, [r.mean_cov for r in records], label="mean coverage")
    if objective_means is not None:
        zm, zphi = objective_means
        a2.axhline(zm, color="k", ls=":", label="mean objective")
        a2.axhline(zphi, color="gray", ls=":", label="importance-weighted objective")
    a2.set_ylabel("coverage level")
    a2.set_xlabel("step")
    a2.legend()
    return _save(fig, path)


def plot_partition_errors(records, path) -> Path:
    k = np.array([r.k for r in records])
    per = np.array([r.per_partition for r in records])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if per.size:
        ax.plot(k, per, lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("mean error per partition")
    return _save(fig, path)


def plot_field(env: Environment, values, path, title: str | None = None, cmap: str = "viridis",
               vmin=None, vmax=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(np.where(env.free, values, np.nan), origin="lower", extent=_extent(env), cmap=cmap,
                   vmin=vmin, vmax=vmax, interpolation="nearest")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_paths(env: Environment, paths, path, labels=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.imshow(np.where(env.free, 1.0, 0.0), origin="lower", extent=_extent(env), cmap="gray", vmin=0, vmax=1)
    if labels is not None:
        ax.imshow(np.where(labels >= 0, labels, np.nan).astype(float), origin="lower", extent=_extent(env),
                  cmap="tab10", vmin=0, vmax=9, alpha=0.3, interpolation="nearest")
    for p in paths:
        p = np.asarray(p)
        ax.plot(p[:, 0], p[:, 1], lw=0.6)
    return _save(fig, path)


def plot_monte_carlo(rows, path) -> Path:
    """Boxplot of biggest-component relative workload per mode."""
    modes = sorted({r.mode for r in rows})
    data = [[x for r in rows if r.mode == m for x in r.relative_workload] for m in modes]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(modes) + 1), modes)
    ax.set_ylabel("relative workload of biggest component [%]")
    return _save(fig, path)
